//! Scratch probe for picking desk-task constants. Not part of the library.

use vfdadv::attacks::AttackSpec;
use vfdadv::data::{split, synthesize, Dataset, SynthKind, SynthSpec};
use vfdadv::evalkit::evaluate;
use vfdadv::losses::Phi;
use vfdadv::models::{ArchDescriptor, ArchId, TappedModel};
use vfdadv::trainer::{train_vanilla, train_vfd_adv, TrainConfig};

fn desk_data(sigma: f64, per_class: usize, ratio: (u32, u32)) -> (Dataset<f64>, Dataset<f64>) {
    let full = synthesize(&SynthSpec {
        kind: SynthKind::RasterizedBlobs,
        num_classes: 3,
        per_class,
        sigma,
        seed: 100,
    })
    .unwrap();
    split(&full, ratio, 100).unwrap()
}

fn adv_cfg(beta: f64, lambda: f64, seed: u64, epochs: usize, eps: f64) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        batch_size: 32,
        seed,
        ..TrainConfig::default()
    };
    cfg.sgd.learning_rate = 0.01;
    cfg.attack = AttackSpec::pgd(eps, 7, eps / 3.0);
    cfg.loss.phi = Phi::TradesKl;
    cfg.loss.beta = beta;
    cfg.loss.lambda = lambda;
    cfg
}

fn accs(model: &TappedModel<f64>, test: &Dataset<f64>) -> (f64, f64) {
    let spec = AttackSpec::pgd(0.25, 20, 0.0625);
    let report = evaluate(model, "m", test, "d", &[spec], None, 1000).unwrap();
    (report.clean.fraction(), report.attacks[0].robust.fraction())
}

fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = rank;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn main() {
    let desc = ArchDescriptor::new(ArchId::CnnSmall, vec![1, 8, 8], 3);
    let t0 = std::time::Instant::now();
    let round = |v: &Vec<f64>| v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect::<Vec<_>>();

    let (train, test) = desk_data(0.65, 240, (1, 3));
    println!("data: {} train / {} test", train.len(), test.len());

    let mut teachers = Vec::new();
    for seed in [1u64, 2, 3] {
        let mut tcfg = TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        };
        tcfg.sgd.learning_rate = 0.05;
        let teacher = train_vanilla(&desc, &train, &tcfg).unwrap();
        let tm = teacher.checkpoint.instantiate().unwrap();
        let (tc, tr) = accs(&tm, &test);
        println!("teacher seed {seed}: clean {tc:.3} rob {tr:.3}");
        teachers.push(teacher.checkpoint);
    }

    let lambdas = [0.0, 0.02, 0.03, 0.04];
    for (arm, beta, epochs) in [("b10e30", 10.0, 30), ("b14e30", 14.0, 30), ("b6e60", 6.0, 60)] {
        let mut lc = vec![0.0; lambdas.len()];
        let mut lr_ = vec![0.0; lambdas.len()];
        for (s, seed) in [1u64, 2, 3].into_iter().enumerate() {
            for (i, &lambda) in lambdas.iter().enumerate() {
                let mut cfg = adv_cfg(beta, lambda, seed, epochs, 0.25);
                cfg.loss.tap = "block1".to_string();
                let run = train_vfd_adv(Some(&teachers[s]), &desc, &train, &cfg).unwrap();
                let model = run.checkpoint.instantiate().unwrap();
                let (c, r) = accs(&model, &test);
                print!("  [{arm}] seed {seed} l {lambda}: {c:.3}/{r:.3}");
                lc[i] += c / 3.0;
                lr_[i] += r / 3.0;
            }
            println!("  ({:?})", t0.elapsed());
        }
        println!("[{arm}] l clean {:?}", round(&lc));
        println!("[{arm}] l rob   {:?}", round(&lr_));
        for i in 1..lambdas.len() {
            println!(
                "[{arm}] lambda {} margin: clean {:+.3} rob {:+.3}",
                lambdas[i],
                lc[i] - lc[0],
                lr_[i] - lr_[0]
            );
        }
    }
    println!("total {:?}", t0.elapsed());
    let _ = spearman(&[1.0, 2.0], &[1.0, 2.0]);
}
