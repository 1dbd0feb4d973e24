//! One test per acceptance criterion. Each prints a single
//! `PASS`/`FAIL` line with the measured quantities, then asserts.

use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use mie::data::{self, MultimodalDataset, Split, SyntheticSpec};
use mie::eval;
use mie::gradmod::{self, GmConfig};
use mie::linalg::{matmul, matmul_nt, sym_eigen, Matrix};
use mie::nn::{self, Architecture, Batch, ModalityModel};
use mie::sam::{self, SamConfig};
use mie::trainer::{self, modality_index, Ablation, AblationTable, GmMask, TrainConfig, Trainer, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BUDGET_ABLATION: Duration = Duration::from_secs(300);

/// Heavy criteria hold this so their timings are not shared with others.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let v = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, v).unwrap()
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let a = normal_matrix(n, n, rng);
    let mut s = a.clone();
    s.axpy(1.0, &a.transpose()).unwrap();
    s.scale(0.5);
    s
}

fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let k = rng.random_range(1..=2 * n);
    let f = normal_matrix(n, k, rng);
    matmul_nt(&f, &f).unwrap()
}

fn random_batch(d: usize, c: usize, b: usize, rng: &mut ChaCha8Rng) -> Batch {
    let labels = (0..b).map(|_| rng.random_range(0..c)).collect();
    Batch::new(normal_matrix(b, d, rng), labels).unwrap()
}

fn diff_norm(a: &Matrix, b: &Matrix) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).unwrap();
    d.frobenius_norm()
}

#[test]
fn criterion_01_gradient_oracle() {
    let _g = exclusive();
    let start = Instant::now();
    let h = 1e-5;
    let (mut checked, mut agreed) = (0usize, 0usize);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let d = rng.random_range(2..=16);
        let c = rng.random_range(2..=10);
        let model = ModalityModel::new(Architecture::new(d, c), &mut rng);
        let batch = random_batch(d, c, rng.random_range(1..=12), &mut rng);
        let grad = nn::backward(&model, &batch).unwrap().flatten();
        let theta = model.flatten();
        let loss_at = |p: &[f64]| {
            let mut m = model.clone();
            m.set_flat(p).unwrap();
            nn::batch_loss(&m, &batch).unwrap()
        };
        for _ in 0..50 {
            let i = rng.random_range(0..theta.len());
            let mut p = theta.clone();
            p[i] = theta[i] + h;
            let up = loss_at(&p);
            p[i] = theta[i] - h;
            let down = loss_at(&p);
            let fd = (up - down) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            checked += 1;
            if rel <= 1e-4 {
                agreed += 1;
            }
        }
    }
    let frac = agreed as f64 / checked as f64;
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient oracle",
        frac >= 0.99 && elapsed < Duration::from_secs(60),
        format!("{agreed}/{checked} = {frac:.4} within 1e-4 (need 0.99), {elapsed:.2?} (< 60 s)"),
    );
}

#[test]
fn criterion_02_sam_contract() {
    let mut worst_norm = 0.0f64;
    let mut worst_grad = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
        let d = rng.random_range(2..=8);
        let c = rng.random_range(2..=5);
        let arch = Architecture {
            input_dim: d,
            hidden_dim: rng.random_range(2..=12),
            feature_dim: rng.random_range(2..=8),
            classes: c,
        };
        let model = ModalityModel::new(arch, &mut rng);
        let batch = random_batch(d, c, rng.random_range(1..=12), &mut rng);
        let cfg = SamConfig::with_rho(10f64.powf(rng.random_range(-3.0..0.0)));

        let g1 = nn::backward(&model, &batch).unwrap();
        let eps = sam::perturbation(&g1, &cfg).unwrap();
        worst_norm = worst_norm.max((eps.norm() - cfg.rho).abs() / cfg.rho);

        let shifted: Vec<f64> = model.flatten().iter().zip(eps.flatten()).map(|(t, e)| t + e).collect();
        let mut explicit = model.clone();
        explicit.set_flat(&shifted).unwrap();
        let want = nn::backward(&explicit, &batch).unwrap().flatten();
        let got = sam::sam_gradient(&model, &batch, &cfg).unwrap().flatten();
        for (a, b) in got.iter().zip(&want) {
            worst_grad = worst_grad.max((a - b).abs() / b.abs().max(1.0));
        }
    }

    let mut ascents = 0;
    for case in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2500 + case);
        let n = rng.random_range(1..=10);
        let f = normal_matrix(n, n, &mut rng);
        let mut a = matmul_nt(&f, &f).unwrap();
        a.axpy(1e-3, &Matrix::identity(n)).unwrap();
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let loss = |t: &[f64]| {
            let at = a.mul_vec(t).unwrap();
            0.5 * t.iter().zip(&at).map(|(x, y)| x * y).sum::<f64>() + t.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        let grad: Vec<f64> = a.mul_vec(&theta).unwrap().iter().zip(&b).map(|(x, y)| x + y).collect();
        let cfg = SamConfig::with_rho(rng.random_range(1e-3..1.0));
        let eps = sam::perturbation_flat(&grad, &cfg).unwrap();
        let shifted: Vec<f64> = theta.iter().zip(&eps).map(|(t, e)| t + e).collect();
        if loss(&shifted) >= loss(&theta) {
            ascents += 1;
        }
    }
    verdict(
        2,
        "SAM contract",
        worst_norm <= 1e-12 && worst_grad <= 1e-12 && ascents == 50,
        format!(
            "max |‖ε*‖−ρ|/ρ = {worst_norm:.2e}, max gradient deviation {worst_grad:.2e} (both ≤ 1e-12), ascent on {ascents}/50 quadratics"
        ),
    );
}

#[test]
fn criterion_03_t_matrix() {
    let mut worst_sym = 0.0f64;
    let mut worst_lo = f64::INFINITY;
    let mut worst_hi = f64::NEG_INFINITY;
    let mut bound_ok = true;
    let mut worst_scale = 0.0f64;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + case);
        let n = rng.random_range(1..=64);
        let cov = random_psd(n, &mut rng);
        let tau = rng.random_range(0.01..5.0);
        let cfg = GmConfig { tau, ..GmConfig::default() };
        let t = match gradmod::modification_matrix(&cov, &cfg).unwrap().0 {
            Some(t) => t,
            None => Matrix::identity(n),
        };
        worst_sym = worst_sym.max(t.asymmetry().unwrap());
        let ev = sym_eigen(&t).unwrap().eigenvalues;
        let (lo, hi) = (ev[n - 1], ev[0]);
        bound_ok &= lo >= (-tau).exp() - 1e-9 && hi <= 1.0 + 1e-9;
        worst_lo = worst_lo.min(lo - (-tau).exp());
        worst_hi = worst_hi.max(hi - 1.0);
        for c in [1e-3, 1e3] {
            let scaled = cov.scaled(c);
            let ts = gradmod::modification_matrix(&scaled, &cfg).unwrap().0.unwrap_or_else(|| Matrix::identity(n));
            let max_diff = t.as_slice().iter().zip(ts.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_scale = worst_scale.max(max_diff);
        }
    }

    // τ = 0: training with modification enabled must match training with it disabled bit for bit
    let ds = data::generate(&SyntheticSpec {
        n: 90,
        classes: 3,
        dims: vec![6, 6],
        split_fractions: [0.6, 0.2, 0.2],
        ..SyntheticSpec::default()
    })
    .unwrap();
    let small = |gm_on: bool, tau: f64| TrainConfig {
        out_iters: 2,
        hidden_dim: 10,
        feature_dim: 8,
        gm: GmConfig { tau, ..GmConfig::default() },
        ablation: Ablation { gm_on, ..Ablation::default() },
        ..TrainConfig::default()
    };
    let zero = trainer::train(&ds, &small(true, 0.0)).unwrap();
    let off = trainer::train(&ds, &small(false, 0.4)).unwrap();
    let identical = zero
        .models
        .iter()
        .zip(&off.models)
        .all(|(a, b)| a.flatten().iter().zip(b.flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let live = trainer::train(&ds, &small(true, 0.4)).unwrap();
    let changes = live.models[0].flatten() != off.models[0].flatten();

    verdict(
        3,
        "T-matrix properties",
        worst_sym <= 1e-10 && bound_ok && worst_scale <= 1e-8 && identical && changes,
        format!(
            "asymmetry {worst_sym:.2e} (≤ 1e-10), λmin−exp(−τ) ≥ {worst_lo:.2e}, λmax−1 ≤ {worst_hi:.2e}, \
             scale deviation {worst_scale:.2e} (≤ 1e-8), τ=0 bitwise equal to disabled: {identical}, τ=0.4 differs: {changes}"
        ),
    );
}

#[test]
fn criterion_04_eigensolver() {
    let _g = exclusive();
    let start = Instant::now();
    let mut worst_rec = 0.0f64;
    let mut worst_orth = 0.0f64;
    let sizes = [1, 2, 3, 5, 8, 13, 21, 32, 50, 64, 80, 100, 128];
    for (k, &n) in sizes.iter().enumerate() {
        for rep in 0..2u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + 10 * k as u64 + rep);
            let a = random_symmetric(n, &mut rng);
            let e = sym_eigen(&a).unwrap();
            worst_rec = worst_rec.max(diff_norm(&e.reconstruct(), &a) / a.frobenius_norm());
            let vtv = matmul(&e.eigenvectors.transpose(), &e.eigenvectors).unwrap();
            worst_orth = worst_orth.max(diff_norm(&vtv, &Matrix::identity(n)));
        }
    }
    let elapsed = start.elapsed();
    verdict(
        4,
        "eigensolver",
        worst_rec <= 1e-8 && worst_orth <= 1e-8 && elapsed < Duration::from_secs(30),
        format!("relative reconstruction {worst_rec:.2e}, ‖VᵀV−I‖ {worst_orth:.2e} (both ≤ 1e-8), {elapsed:.2?} (< 30 s)"),
    );
}

#[test]
fn criterion_05_schedule() {
    let mut index_ok = true;
    for m in 1..=16usize {
        for j in 1..=m {
            let predecessor = if j == 1 { m } else { j - 1 };
            index_ok &= modality_index(j, m).unwrap() == predecessor;
        }
    }

    let ds = data::generate(&SyntheticSpec {
        n: 80,
        classes: 4,
        dims: vec![5, 7, 3],
        snr: vec![2.0, 1.0, 0.5],
        split_fractions: [0.5, 0.25, 0.25],
        seed: 5,
    })
    .unwrap();
    let cfg = TrainConfig {
        hidden_dim: 9,
        feature_dim: 6,
        ablation: Ablation::baseline(),
        ..TrainConfig::default()
    };
    let mut sgd_ok = true;
    let idx: Vec<usize> = ds.split_indices(Split::Train).into_iter().take(cfg.batch_size).collect();
    for j in 0..3 {
        let mut tr = Trainer::new(&ds, cfg.clone()).unwrap();
        let before = tr.models()[j].clone();
        tr.step(j, &idx).unwrap();
        let g = nn::backward(&before, &ds.batch(j, &idx).unwrap()).unwrap().flatten();
        let lr = cfg.learning_rate(j);
        let want: Vec<f64> = before
            .flatten()
            .iter()
            .zip(&g)
            .map(|(&p, &gi)| p - lr * (gi + cfg.weight_decay * p))
            .collect();
        let got = tr.models()[j].flatten();
        sgd_ok &= got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
        sgd_ok &= (0..3).filter(|&o| o != j).all(|o| tr.models()[o].flatten() == Trainer::new(&ds, cfg.clone()).unwrap().models()[o].flatten());
    }

    let mut lengths = Vec::new();
    for (out_iters, m) in [(1usize, 1usize), (2, 2), (3, 3)] {
        let sub = data::generate(&SyntheticSpec {
            n: 40,
            classes: 3,
            dims: vec![4; m],
            snr: vec![1.0; m],
            split_fractions: [0.5, 0.25, 0.25],
            seed: 1,
        })
        .unwrap();
        let c = TrainConfig {
            out_iters,
            inner_iters: Some(3),
            hidden_dim: 6,
            feature_dim: 5,
            ..TrainConfig::default()
        };
        let trace = trainer::train(&sub, &c).unwrap().trace;
        let order_ok = trace
            .iter()
            .enumerate()
            .all(|(i, r)| r.outer_iter == i / m + 1 && r.modality_index == i % m + 1);
        lengths.push((trace.len() == out_iters * m && order_ok, trace.len(), out_iters * m));
    }
    let lengths_ok = lengths.iter().all(|l| l.0);
    verdict(
        5,
        "alternating schedule",
        index_ok && sgd_ok && lengths_ok,
        format!(
            "closed-form index for m ≤ 16: {index_ok}, switches-off step bitwise SGD: {sgd_ok}, trace lengths {:?}",
            lengths.iter().map(|l| (l.1, l.2)).collect::<Vec<_>>()
        ),
    );
}

struct AblationRuns {
    dataset: MultimodalDataset,
    table: AblationTable,
    elapsed: Duration,
}

fn variant(label: &str, sam_on: bool, gm_on: bool, gm_mask: GmMask) -> Variant {
    Variant {
        label: label.into(),
        config: TrainConfig {
            ablation: Ablation { sam_on, gm_on, gm_mask },
            ..TrainConfig::default()
        },
    }
}

/// The four switch combinations on the default dataset, shared by the
/// ordering and singular-value criteria.
fn switch_runs() -> &'static AblationRuns {
    static RUNS: OnceLock<AblationRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dataset = data::generate(&SyntheticSpec::default()).unwrap();
        let variants = [
            variant("baseline", false, false, GmMask::Full),
            variant("sam_only", true, false, GmMask::Full),
            variant("gm_only", false, true, GmMask::Full),
            variant("mie", true, true, GmMask::Full),
        ];
        let start = Instant::now();
        let table = trainer::ablate(&dataset, &variants, &SEEDS, None).unwrap();
        AblationRuns {
            dataset,
            table,
            elapsed: start.elapsed(),
        }
    })
}

fn fused_mean(table: &AblationTable, label: &str) -> f64 {
    table.rows.iter().find(|r| r.label == label).unwrap().fused_average.accuracy.mean
}

#[test]
fn criterion_06_ablation_ordering() {
    let _g = exclusive();
    let runs = switch_runs();
    let acc = |l| fused_mean(&runs.table, l);
    let (base, sam_only, gm_only, mie) = (acc("baseline"), acc("sam_only"), acc("gm_only"), acc("mie"));
    let pass = mie - base >= 0.01 && sam_only >= base && gm_only >= base && runs.elapsed < BUDGET_ABLATION;
    verdict(
        6,
        "ablation ordering",
        pass,
        format!(
            "fused accuracy over {} seeds: baseline {base:.4}, sam_only {sam_only:.4}, gm_only {gm_only:.4}, mie {mie:.4}; \
             mie − baseline = {:+.4} (need ≥ +0.01); 20 runs in {:.1?} (< 300 s)",
            SEEDS.len(),
            mie - base,
            runs.elapsed
        ),
    );
}

#[test]
fn criterion_07_interactive_gm() {
    let _g = exclusive();
    let runs = switch_runs();
    let variants = [
        variant("mask=1->2", true, true, GmMask::Pairs(vec![(0, 1)])),
        variant("mask=2->1", true, true, GmMask::Pairs(vec![(1, 0)])),
    ];
    let start = Instant::now();
    let table = trainer::ablate(&runs.dataset, &variants, &SEEDS, None).unwrap();
    // the full-mask runs are shared; charge their share of the switch grid
    let elapsed = start.elapsed() + runs.elapsed / 4;
    let full = fused_mean(&runs.table, "mie");
    let one_sided: Vec<(String, f64)> = table.rows.iter().map(|r| (r.label.clone(), r.fused_average.accuracy.mean)).collect();
    let pass = one_sided.iter().all(|(_, a)| full >= *a) && elapsed < BUDGET_ABLATION;
    verdict(
        7,
        "interactive GM ordering",
        pass,
        format!("full {full:.4} vs one-sided {one_sided:?}; 15 runs in {elapsed:.1?} (< 300 s)"),
    );
}

fn argmax_oracle(row: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

fn map_oracle(p: &Matrix, labels: &[usize]) -> f64 {
    let n = labels.len();
    let mut aps = Vec::new();
    for k in 0..p.cols() {
        let positives: Vec<usize> = (0..n).filter(|&i| labels[i] == k).collect();
        if positives.is_empty() {
            continue;
        }
        // rank of sample i: samples strictly above it, or tied with a lower index, plus one
        let rank = |i: usize| {
            1 + (0..n)
                .filter(|&j| p.get(j, k) > p.get(i, k) || (p.get(j, k) == p.get(i, k) && j < i))
                .count()
        };
        let ap: f64 = positives
            .iter()
            .map(|&i| {
                let r = rank(i);
                let above = positives.iter().filter(|&&q| rank(q) <= r).count();
                above as f64 / r as f64
            })
            .sum::<f64>()
            / positives.len() as f64;
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn f1_oracle(p: &Matrix, labels: &[usize]) -> f64 {
    let c = p.cols();
    let decided: Vec<usize> = (0..labels.len()).map(|i| argmax_oracle(p.row(i))).collect();
    let mut total = 0.0;
    for k in 0..c {
        let tp = (0..labels.len()).filter(|&i| decided[i] == k && labels[i] == k).count() as f64;
        let predicted = decided.iter().filter(|&&d| d == k).count() as f64;
        let actual = labels.iter().filter(|&&y| y == k).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        total += if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
    }
    total / c as f64
}

#[test]
fn criterion_08_metric_oracles() {
    let (mut map_dev, mut f1_dev) = (0.0f64, 0.0f64);
    let mut acc_exact = true;
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(8000 + case);
        let n = rng.random_range(1..=30);
        let c = rng.random_range(2..=6);
        // coarse scores so that ties occur
        let coarse = rng.random_bool(0.5);
        let mut p = Matrix::zeros(n, c);
        for i in 0..n {
            let row: Vec<f64> = (0..c)
                .map(|_| if coarse { rng.random_range(1..=3) as f64 } else { rng.random_range(0.01..1.0) })
                .collect();
            let s: f64 = row.iter().sum();
            for (k, v) in row.iter().enumerate() {
                p.set(i, k, v / s);
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        map_dev = map_dev.max((eval::mean_average_precision(&p, &labels).unwrap() - map_oracle(&p, &labels)).abs());
        f1_dev = f1_dev.max((eval::macro_f1(&p, &labels).unwrap() - f1_oracle(&p, &labels)).abs());
        let hits = (0..n).filter(|&i| argmax_oracle(p.row(i)) == labels[i]).count();
        acc_exact &= eval::accuracy(&p, &labels).unwrap() == hits as f64 / n as f64;
    }
    verdict(
        8,
        "metric oracles",
        map_dev <= 1e-12 && f1_dev <= 1e-12 && acc_exact,
        format!("1000 instances: MAP deviation {map_dev:.2e}, macro-F1 deviation {f1_dev:.2e} (≤ 1e-12), accuracy exact: {acc_exact}"),
    );
}

#[test]
fn criterion_09_determinism() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = "data.n = 200\ndata.classes = 4\ndata.dims = 8, 6\ntrain.out_iters = 2\nseed = 11\n";
    std::fs::write(dir.path().join("run.cfg"), cfg).unwrap();
    let mie = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_mie"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    mie(&["gen-data", "--config", "run.cfg"]);
    mie(&["train", "--config", "run.cfg", "--out", "a"]);
    mie(&["train", "--config", "run.cfg", "--out", "b"]);
    let files = ["checkpoint_m1.mie", "checkpoint_m2.mie", "trace.jsonl", "metrics.json", "singular.json", "config.txt"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(dir.path().join("a").join(f)).unwrap() != std::fs::read(dir.path().join("b").join(f)).unwrap())
        .collect();
    verdict(
        9,
        "determinism",
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", files.len()),
    );
}

#[test]
fn criterion_10_singular_magnitude() {
    let _g = exclusive();
    let runs = switch_runs();
    let probe = ModalityModel::new(Architecture::new(1, 2), &mut ChaCha8Rng::seed_from_u64(0));
    let layer = probe.head_range().start;
    let mean_of = |label: &str, seed: u64| {
        let run = runs.table.runs.iter().find(|r| r.label == label && r.seed == seed).unwrap();
        let vals: Vec<f64> = run
            .singular
            .iter()
            .map(|rep| rep.layers.iter().find(|s| s.layer == layer).unwrap().mean)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let pairs: Vec<(f64, f64)> = SEEDS.iter().map(|&s| (mean_of("mie", s), mean_of("gm_only", s))).collect();
    let lower = pairs.iter().filter(|(on, off)| on < off).count();
    verdict(
        10,
        "singular magnitude",
        lower >= 4,
        format!(
            "mean singular value of layer {layer} (SAM on, SAM off) per seed: {:?}; SAM-on lower in {lower}/5 (need ≥ 4)",
            pairs.iter().map(|(a, b)| (format!("{a:.4e}"), format!("{b:.4e}"))).collect::<Vec<_>>()
        ),
    );
}
