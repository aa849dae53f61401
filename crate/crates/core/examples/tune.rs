//! Scratch probe: per-tensor gradcheck diagnostics and learning-rate sweeps.

use d2zero::checkpoint::ModelParams;
use d2zero::config::{ExperimentConfig, Toggles};
use d2zero::harness::{compute_gradients, compute_losses, run_train, LossBatch};
use d2zero::pipeline::{toy_embedding_table, SplitConfig};
use d2zero::semantic::EmbeddingTable;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_batch_parts(
    table: &EmbeddingTable,
    n: usize,
    seed: u64,
) -> (Array2<f64>, Vec<usize>, Vec<Option<usize>>, Array1<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled = Array2::from_shape_fn((n, table.dim()), |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            if i == 0 {
                1 + rng.random_range(0..table.n_seen())
            } else {
                rng.random_range(0..=table.n_seen())
            }
        })
        .collect();
    let pseudo: Vec<Option<usize>> = labels
        .iter()
        .map(|&label| (label > 0).then(|| rng.random_range(0..table.n_unseen())))
        .collect();
    let background = Array1::from_shape_fn(table.dim(), |_| rng.random_range(-1.0..1.0));
    (pooled, labels, pseudo, background)
}

const TENSORS: [&str; 9] = [
    "embed.w", "embed.b", "attn.w_q", "attn.w_k", "attn.w_v", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

fn per_tensor_errors(seed: u64, h: f64) {
    let table = toy_embedding_table(&SplitConfig::toy_6_3(), 6, 0.75, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = ModelParams::init(6, 4, 0.0, &mut rng);
    let (pooled, labels, pseudo, background) = random_batch_parts(&table, 5, seed);
    let batch = LossBatch {
        pooled: &pooled,
        labels: &labels,
        pseudo_unseen: &pseudo,
        background: &background,
    };
    let toggles = Toggles::default();
    let (_, grads) = compute_gradients(&params, &table, &batch, &toggles, 0.1, 0.1).unwrap();

    let entry_count = |t: usize| -> usize {
        match t {
            0 => params.embed.w.len(),
            1 => params.embed.b.len(),
            2 => params.attention.w_q.len(),
            3 => params.attention.w_k.len(),
            4 => params.attention.w_v.len(),
            5 => params.mlp.w1.len(),
            6 => params.mlp.b1.len(),
            7 => params.mlp.w2.len(),
            8 => params.mlp.b2.len(),
            _ => unreachable!(),
        }
    };
    let nudged = |t: usize, i: usize, delta: f64| -> ModelParams {
        let mut p = params.clone();
        let slot = match t {
            0 => &mut p.embed.w.as_slice_mut().unwrap()[i],
            1 => &mut p.embed.b.as_slice_mut().unwrap()[i],
            2 => &mut p.attention.w_q.as_slice_mut().unwrap()[i],
            3 => &mut p.attention.w_k.as_slice_mut().unwrap()[i],
            4 => &mut p.attention.w_v.as_slice_mut().unwrap()[i],
            5 => &mut p.mlp.w1.as_slice_mut().unwrap()[i],
            6 => &mut p.mlp.b1.as_slice_mut().unwrap()[i],
            7 => &mut p.mlp.w2.as_slice_mut().unwrap()[i],
            8 => &mut p.mlp.b2.as_slice_mut().unwrap()[i],
            _ => unreachable!(),
        };
        *slot += delta;
        p
    };
    let analytic = |t: usize, i: usize| -> f64 {
        let a = grads.attention.as_ref().unwrap();
        let m = grads.mlp.as_ref().unwrap();
        match t {
            0 => grads.embed_w.as_slice().unwrap()[i],
            1 => grads.embed_b.as_slice().unwrap()[i],
            2 => a.0.as_slice().unwrap()[i],
            3 => a.1.as_slice().unwrap()[i],
            4 => a.2.as_slice().unwrap()[i],
            5 => m.0.as_slice().unwrap()[i],
            6 => m.1.as_slice().unwrap()[i],
            7 => m.2.as_slice().unwrap()[i],
            8 => m.3.as_slice().unwrap()[i],
            _ => unreachable!(),
        }
    };

    println!("seed={seed} h={h:e}");
    for t in 0..9 {
        let mut worst = 0.0_f64;
        let mut worst_i = 0;
        for i in 0..entry_count(t) {
            let plus = compute_losses(&nudged(t, i, h), &table, &batch, &toggles, 0.1, 0.1)
                .unwrap()
                .total;
            let minus = compute_losses(&nudged(t, i, -h), &table, &batch, &toggles, 0.1, 0.1)
                .unwrap()
                .total;
            let slope = (plus - minus) / (2.0 * h);
            let grad = analytic(t, i);
            if slope.abs() < 1e-10 && grad.abs() < 1e-10 {
                continue;
            }
            let rel = (slope - grad).abs() / slope.abs().max(grad.abs());
            if rel > worst {
                worst = rel;
                worst_i = i;
            }
        }
        println!("  {:9} worst {:.3e} at {}", TENSORS[t], worst, worst_i);
    }
}

fn lr_sweep() {
    for lr in [0.02, 0.05, 0.1, 0.2, 0.5] {
        for seed in [11u64, 12, 13] {
            let mut config = ExperimentConfig::default();
            config.steps = 400;
            config.learning_rate = lr;
            config.seed = seed;
            let dir = tempfile::tempdir().unwrap();
            match run_train(&config, dir.path()) {
                Ok(artifacts) => {
                    let avg = |r: std::ops::Range<usize>| {
                        let s: f64 = artifacts.losses[r.clone()].iter().map(|l| l.total).sum();
                        s / r.len() as f64
                    };
                    let n = artifacts.losses.len();
                    println!(
                        "lr={lr:<5} seed={seed} first10={:8.4} mid={:8.4} last10={:8.4} final={:8.4}",
                        avg(0..10),
                        avg(n / 2 - 5..n / 2 + 5),
                        avg(n - 10..n),
                        artifacts.losses[n - 1].total,
                    );
                }
                Err(e) => println!("lr={lr:<5} seed={seed} FAILED: {e}"),
            }
        }
    }
}

fn ablation_runs(seeds: &[u64], steps: usize) {
    let variant = |name: &str| -> Toggles {
        let mut t = Toggles::all_off();
        match name {
            "off" => {}
            "unseen" => t.unseen_ce = true,
            "cond" => t.conditional_classifier = true,
            "adapt" => t.adaptive_background = true,
            "all" => {
                t.unseen_ce = true;
                t.conditional_classifier = true;
                t.adaptive_background = true;
            }
            _ => unreachable!(),
        }
        t
    };
    let names = ["off", "unseen", "cond", "adapt", "all"];
    let mut sums = vec![0.0_f64; names.len()];
    for &seed in seeds {
        let start = std::time::Instant::now();
        print!("seed={seed}");
        for (i, name) in names.iter().enumerate() {
            let mut config = ExperimentConfig::default();
            config.seed = seed;
            config.steps = steps;
            config.toggles = variant(name);
            let dir = tempfile::tempdir().unwrap();
            let artifacts = run_train(&config, dir.path()).unwrap();
            let eval_dir = tempfile::tempdir().unwrap();
            let eval =
                d2zero::harness::run_eval(&artifacts.params, &config, eval_dir.path(), false)
                    .unwrap();
            let hm = eval.report.hm_map().unwrap().unwrap();
            let seen = eval.report.seen.as_ref().unwrap().map;
            let unseen = eval.report.unseen.map;
            sums[i] += hm;
            print!("  {name}: hm={hm:.4} (s={seen:.3} u={unseen:.3})");
        }
        println!("  [{:?}]", start.elapsed());
    }
    println!("-- seed-averaged HM(mAP) --");
    for (i, name) in names.iter().enumerate() {
        println!("  {name:7} {:.4}", sums[i] / seeds.len() as f64);
    }
    let avg = |i: usize| sums[i] / seeds.len() as f64;
    println!("single toggles beat off: unseen {} cond {} adapt {}",
        avg(1) > avg(0), avg(2) > avg(0), avg(3) > avg(0));
    println!("all >= singles: {} {} {}",
        avg(4) >= avg(1), avg(4) >= avg(2), avg(4) >= avg(3));
}

fn copy_paste_runs(seeds: &[u64], steps: usize) {
    for &seed in seeds {
        let mut config = ExperimentConfig::default();
        config.seed = seed;
        config.steps = steps;
        let dir = tempfile::tempdir().unwrap();
        let artifacts = run_train(&config, dir.path()).unwrap();
        let plain_dir = tempfile::tempdir().unwrap();
        let plain =
            d2zero::harness::run_eval(&artifacts.params, &config, plain_dir.path(), false)
                .unwrap();
        let mut cp_config = config.clone();
        cp_config.toggles.copy_paste = true;
        let cp_dir = tempfile::tempdir().unwrap();
        let cp = d2zero::harness::run_eval(&artifacts.params, &cp_config, cp_dir.path(), false)
            .unwrap();
        let recall = |r: &d2zero::eval::EvalReport| r.unseen.recall[1];
        let precision = |r: &d2zero::eval::EvalReport| r.unseen.precision;
        println!(
            "seed={seed} plain: R={:.4} P={:.4}  cp: R={:.4} P={:.4}  dR={:+.4} dP={:+.4}",
            recall(&plain.report),
            precision(&plain.report),
            recall(&cp.report),
            precision(&cp.report),
            recall(&cp.report) - recall(&plain.report),
            precision(&cp.report) - precision(&plain.report),
        );
    }
}

fn diagnose(steps: usize) {
    use d2zero::classifier::{classify_joint, condition_prototypes, ProposalEmbeddingBatch};
    let mut config = ExperimentConfig::default();
    config.seed = 1;
    config.steps = steps;
    let dir = tempfile::tempdir().unwrap();
    let artifacts = run_train(&config, dir.path()).unwrap();
    let params = &artifacts.params;
    let n = artifacts.losses.len();
    println!(
        "train loss: first={:.4} last10={:.4}",
        artifacts.losses[0].total,
        artifacts.losses[n - 10..].iter().map(|l| l.total).sum::<f64>() / 10.0
    );

    let experiment = d2zero::harness::Experiment::new(config.clone()).unwrap();
    let table = experiment.table();
    // One eval scene, by hand.
    let scene = d2zero::pipeline::generate_scene(
        table,
        d2zero::pipeline::SceneMode::Eval,
        d2zero::pipeline::derive_seed(config.seed, 1 << 40),
        &config.scene,
    )
    .unwrap();
    let example = d2zero::pipeline::prepare_from_scene(
        &scene,
        table,
        &params.embed,
        config.n_proposals,
        config.iou_floor,
        0,
    )
    .unwrap();
    println!("instances: {:?}", example.instances.iter().map(|(n, _)| n).collect::<Vec<_>>());
    println!("gt_assignment: {:?}", example.gt_assignment);

    let mut embedded = Array2::<f64>::zeros((example.pooled.nrows(), table.dim()));
    for (i, row) in example.pooled.rows().into_iter().enumerate() {
        embedded.row_mut(i).assign(&params.embed.embed(row));
    }
    println!(
        "embedded row norms: {:?}",
        embedded
            .rows()
            .into_iter()
            .map(|r| (r.dot(&r)).sqrt())
            .map(|v| (v * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );
    let batch = ProposalEmbeddingBatch::new(embedded).unwrap();
    let mut protos = condition_prototypes(table, &batch, &params.attention).unwrap();
    protos = protos
        .with_background(example.background.vector.clone())
        .unwrap();
    let norms: Vec<f64> = protos
        .seen
        .rows()
        .into_iter()
        .chain(protos.unseen.rows())
        .map(|r| ((r.dot(&r)).sqrt() * 1000.0).round() / 1000.0)
        .collect();
    println!("conditioned prototype norms (seen then unseen): {norms:?}");
    // Pairwise cosines of conditioned prototypes.
    let all: Vec<ndarray::Array1<f64>> = protos
        .seen
        .rows()
        .into_iter()
        .chain(protos.unseen.rows())
        .map(|r| r.to_owned())
        .collect();
    let mut min_cos = 1.0_f64;
    let mut max_cos = -1.0_f64;
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            let c = all[i].dot(&all[j]) / (all[i].dot(&all[i]).sqrt() * all[j].dot(&all[j]).sqrt());
            min_cos = min_cos.min(c);
            max_cos = max_cos.max(c);
        }
    }
    println!("prototype pairwise cosine range: [{min_cos:.4}, {max_cos:.4}]");
    println!("background slot norm: {:.4} (fallback={})", example.background.vector.dot(&example.background.vector).sqrt(), example.background.used_fallback);

    let mut histogram = vec![0usize; 1 + table.n_seen() + table.n_unseen()];
    for i in 0..batch.len() {
        let scores = classify_joint(batch.row(i), &protos, Some(&params.mlp), config.tau_cls).unwrap();
        let k = scores.argmax();
        histogram[k] += 1;
        if i < 6 {
            let v: Vec<f64> = scores
                .values()
                .iter()
                .map(|p| (p * 1000.0).round() / 1000.0)
                .collect();
            println!("  proposal {i} (gt {}): argmax {k} conf {:.3} probs {v:?}", example.gt_assignment[i], scores.values()[k]);
        }
    }
    println!("joint argmax histogram (bg, seen.., unseen..): {histogram:?}");
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "grad".into());
    let arg = |n: usize, default: u64| -> u64 {
        std::env::args()
            .nth(n)
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    match mode.as_str() {
        "grad" => {
            for h in [1e-4, 1e-5, 1e-6] {
                per_tensor_errors(17, h);
            }
            for seed in [18, 19, 20, 21] {
                per_tensor_errors(seed, 1e-5);
            }
        }
        "lr" => lr_sweep(),
        "c6" => {
            let steps = arg(2, 2000) as usize;
            let n_seeds = arg(3, 5);
            let seeds: Vec<u64> = (1..=n_seeds).collect();
            ablation_runs(&seeds, steps);
        }
        "c7" => {
            let steps = arg(2, 2000) as usize;
            let n_seeds = arg(3, 5);
            let seeds: Vec<u64> = (1..=n_seeds).collect();
            copy_paste_runs(&seeds, steps);
        }
        other => eprintln!("unknown mode {other}"),
    }
}
