use momkd::config::RunConfig;
use momkd::gradcheck::{objective_suite, GradCase, LossTerm};
use momkd::params::GroupKind;

fn small() -> RunConfig {
    RunConfig {
        d_in: 10,
        g_dim: 8,
        latent_dim: 12,
        sphere_dim: 6,
        omics_hidden: 9,
        memory_size: 4,
        k_neighbors: 4,
        ..RunConfig::default()
    }
}

const WSI: [GroupKind; 2] = [GroupKind::WsiEncoder, GroupKind::Classifier];
const OMICS: [GroupKind; 2] = [GroupKind::OmicsEncoder, GroupKind::OmicsDecoder];

#[test]
fn every_loss_term_matches_central_differences() {
    for seed in 0..5 {
        for (term, report) in objective_suite(&small(), seed).unwrap() {
            let name = term.name();
            assert!(report.checked >= 25 * 5, "{name}: {} coordinates", report.checked);
            assert!(report.max_rel_error < 1e-4, "seed {seed} {name}: {:?}", report.worst);
        }
    }
}

#[test]
fn gradient_routing_is_exactly_decoupled() {
    for seed in 0..5 {
        let c = GradCase::new(&small(), seed).unwrap();
        let ce = c.grads_of(LossTerm::Ce).unwrap();
        assert!(ce.is_all_zero(GroupKind::Memory));
        assert!(OMICS.iter().all(|&k| ce.is_all_zero(k)));
        assert!(!ce.is_all_zero(GroupKind::WsiEncoder));

        let ao = c.grads_of(LossTerm::AlignOmics).unwrap();
        assert!(WSI.iter().all(|&k| ao.is_all_zero(k)));
        assert!(!ao.is_all_zero(GroupKind::OmicsEncoder) && !ao.is_all_zero(GroupKind::Memory));

        let aw = c.grads_of(LossTerm::AlignWsi).unwrap();
        assert!(OMICS.iter().all(|&k| aw.is_all_zero(k)));
        assert!(!aw.is_all_zero(GroupKind::WsiEncoder) && !aw.is_all_zero(GroupKind::Memory));

        let mse = c.grads_of(LossTerm::Mse).unwrap();
        assert!(WSI.iter().all(|&k| mse.is_all_zero(k)));
        assert!(mse.is_all_zero(GroupKind::Memory));

        let commit = c.grads_of(LossTerm::MemCommitment).unwrap();
        assert!(commit.is_all_zero(GroupKind::Memory));
        assert!(!commit.is_all_zero(GroupKind::WsiEncoder));

        let orth = c.grads_of(LossTerm::MemOrthogonality).unwrap();
        assert!(GroupKind::ALL.iter().filter(|&&k| k != GroupKind::Memory).all(|&k| orth.is_all_zero(k)));
    }
}

#[test]
fn default_config_suite_passes() {
    let start = std::time::Instant::now();
    let reports = objective_suite(&RunConfig::default(), 0).unwrap();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    assert!(worst < 1e-4, "{reports:?}");
    eprintln!("default suite: worst {worst:.2e} in {:?}", start.elapsed());
}
