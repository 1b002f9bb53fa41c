use momkd::evalkit::auc;
use momkd::synthdata::{generate, shift, ShiftConfig, SynthConfig};
use momkd::train::{build_graphs, evaluate, train, TrainOptions};
use momkd::{PairedSample, RunConfig};

fn labels(s: &[PairedSample]) -> Vec<u8> {
    s.iter().map(|s| s.label).collect()
}

/// Plain logistic regression by full-batch gradient descent.
fn logistic_probe(x: &[Vec<f64>], y: &[u8]) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..500 {
        let mut g = vec![0.0; d + 1];
        for (xi, &yi) in x.iter().zip(y) {
            let z = w[d] + xi.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let r = 1.0 / (1.0 + (-z).exp()) - f64::from(yi);
            xi.iter().enumerate().for_each(|(j, v)| g[j] += r * v);
            g[d] += r;
        }
        w.iter_mut().zip(&g).for_each(|(wj, gj)| *wj -= 0.1 * gj / x.len() as f64);
    }
    w
}

#[test]
fn profiles_carry_dominant_class_signal() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let rows = |s: &[PairedSample]| -> Vec<Vec<f64>> { s.iter().map(|s| s.profile.data().to_vec()).collect() };
    let w = logistic_probe(&rows(&ds.train), &labels(&ds.train));
    let d = w.len() - 1;
    let scores: Vec<f64> = rows(&ds.test)
        .iter()
        .map(|x| w[d] + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    assert!(auc(&scores, &labels(&ds.test)).unwrap() > 0.95);
}

#[test]
fn signal_free_bags_do_not_separate_classes() {
    let cfg = SynthConfig {
        signal_patch_fraction: 0.0,
        n_test: 400,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let [neg, pos] = &ds.provenance.patch_prototypes;
    let axis: Vec<f64> = pos.iter().zip(neg).map(|(p, n)| p - n).collect();
    let scores: Vec<f64> = ds
        .test
        .iter()
        .map(|s| {
            let (i, d) = s.embeddings.dims2();
            (0..i).map(|r| (0..d).map(|j| s.embeddings.row_slice(r)[j] * axis[j]).sum::<f64>()).sum::<f64>() / i as f64
        })
        .collect();
    let a = auc(&scores, &labels(&ds.test)).unwrap();
    assert!((a - 0.5).abs() < 0.1, "{a}");
}

#[test]
fn default_shift_lowers_a_trained_models_auc() {
    let cfg = RunConfig {
        latent_dim: 64,
        sphere_dim: 32,
        omics_hidden: 64,
        memory_size: 8,
        kmeans_sample: 2000,
        max_epochs: 40,
        ..RunConfig::default()
    };
    let ds = generate(&cfg.synth()).unwrap();
    let shifted = shift(&ds, &ShiftConfig::default()).unwrap();
    let out = train(
        &cfg,
        &ds,
        TrainOptions {
            freeze_memory: true,
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let eval = |s: &[PairedSample]| evaluate(&out.model, s, &build_graphs(s, cfg.k_neighbors).unwrap(), &cfg, 1).unwrap().auc;
    let (id, sh) = (eval(&ds.test), eval(&shifted.test));
    assert!(sh < id, "in-distribution {id}, shifted {sh}");
}
