use imjense::coilmodel::build_basis;
use imjense::coords::make_grid;
use imjense::mrop::{KSpaceVolume, SamplingMask};
use imjense::synthdata::{acquire, make_mask, make_phantom, simulate_coils, MaskSpec, PhantomSpec};
use imjense::tensorgrad::{finite_difference_check, Tape};
use imjense::trainer::{init_params, record_loss, train, train_as, Precision, ReconConfig};
use imjense::SensitivityMaps;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn measurement(d: usize, coils: usize, r: usize, acs: usize) -> KSpaceVolume {
    let truth = make_phantom(&PhantomSpec::shepp_logan(d, d)).unwrap();
    let maps = simulate_coils(coils, d, d, 11).unwrap();
    let mask = make_mask(&MaskSpec { d_fe: d, d_pe: d, r, acs }).unwrap();
    acquire(&truth, &maps, &mask, 0.0, 0).unwrap()
}

fn tiny_config() -> ReconConfig {
    ReconConfig {
        hidden_layers: 2,
        hidden_width: 32,
        poly_order: 4,
        iters: 5,
        precision: Precision::Double,
        ..ReconConfig::default()
    }
}

#[test]
fn one_iteration_gives_one_record_and_moves_parameters() {
    let meas = measurement(16, 2, 2, 4);
    let cfg = ReconConfig { iters: 1, ..tiny_config() };
    let out = train(&meas, &cfg).unwrap();
    assert_eq!(out.history.len(), 1);
    let (inr0, poly0) = init_params::<f64>(&cfg, 2).unwrap();
    assert_ne!(out.checkpoint.inr, inr0);
    assert_ne!(out.checkpoint.poly, poly0);
}

#[test]
fn training_is_deterministic() {
    let meas = measurement(16, 2, 2, 4);
    for precision in [Precision::Single, Precision::Double] {
        let cfg = ReconConfig { precision, ..tiny_config() };
        let a = train(&meas, &cfg).unwrap();
        let b = train(&meas, &cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        let last = |h: &imjense::trainer::TrainHistory| h.records.last().unwrap().total.to_bits();
        assert_eq!(last(&a.history), last(&b.history));
    }
}

#[test]
fn zero_poly_rate_freezes_coefficients() {
    let meas = measurement(16, 3, 2, 4);
    let cfg = ReconConfig { lr_poly: 0.0, ..tiny_config() };
    let out = train(&meas, &cfg).unwrap();
    let (inr0, poly0) = init_params::<f64>(&cfg, 3).unwrap();
    assert_eq!(out.checkpoint.poly, poly0);
    assert_ne!(out.checkpoint.inr, inr0);
}

#[test]
fn lambda_is_irrelevant_without_tv() {
    let meas = measurement(16, 2, 2, 4);
    let a = train(&meas, &ReconConfig { use_tv: false, lambda: 0.5, ..tiny_config() }).unwrap();
    let b = train(&meas, &ReconConfig { use_tv: false, lambda: 40.0, ..tiny_config() }).unwrap();
    assert_eq!(a.checkpoint, b.checkpoint);
    let c = train(&meas, &ReconConfig { lambda: 40.0, ..tiny_config() }).unwrap();
    assert_ne!(a.checkpoint, c.checkpoint);
}

#[test]
fn best_loss_so_far_never_increases() {
    let meas = measurement(16, 2, 2, 4);
    let out = train(&meas, &ReconConfig { iters: 40, ..tiny_config() }).unwrap();
    let mut best = f64::INFINITY;
    let mut bests = Vec::new();
    for r in &out.history.records {
        best = best.min(r.total);
        bests.push(best);
    }
    assert!(bests.windows(2).all(|w| w[1] <= w[0]));
    assert!(out.history.records.iter().enumerate().all(|(i, r)| r.iteration == i));
}

#[test]
fn rejects_empty_mask_and_bad_start() {
    let meas = measurement(16, 2, 2, 4);
    let empty = KSpaceVolume {
        mask: SamplingMask::empty(16, 16),
        ..meas.clone()
    };
    assert!(train(&empty, &tiny_config()).is_err());
    let start = init_params::<f64>(&tiny_config(), 5).unwrap();
    assert!(train_as(&meas, &tiny_config(), Some(start)).is_err());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    let meas = measurement(16, 3, 2, 4);
    let cfg = ReconConfig { poly_order: 15, ..tiny_config() };
    let (inr, poly) = init_params::<f64>(&cfg, 3).unwrap();
    let grid = make_grid(16, 16).unwrap();
    let mut tape = Tape::<f64>::new();
    let graph = record_loss(
        &inr,
        &poly,
        inr.network_input(&grid).unwrap(),
        build_basis(&grid, cfg.poly_order).to_tensor(),
        &meas,
        &cfg,
        &mut tape,
    )
    .unwrap();
    let mut leaves = graph.leaves.0.clone();
    leaves.push(graph.coeffs);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let entries: Vec<_> = (0..240)
        .map(|_| {
            let leaf = leaves[rng.random_range(0..leaves.len())];
            (leaf, rng.random_range(0..tape.value(leaf).len()))
        })
        .collect();
    let report = finite_difference_check(&mut tape, graph.total, &entries, 1e-6).unwrap();
    assert_eq!(report.checked, 240);
    assert!(report.max_rel_error <= 1e-4, "{report:?}");
}

#[test]
fn fully_sampled_single_coil_converges() {
    let truth = make_phantom(&PhantomSpec::shepp_logan(32, 32)).unwrap();
    let meas = acquire(&truth, &SensitivityMaps::ones(1, 32, 32), &SamplingMask::full(32, 32), 0.0, 0).unwrap();
    let cfg = ReconConfig {
        iters: 300,
        w0: 50.0,
        use_tv: false,
        lr_inr: 2e-3,
        lr_poly: 1e-3,
        ..ReconConfig::smoke()
    };
    let out = train(&meas, &cfg).unwrap();
    let first = out.history.records[0].dc;
    let last = out.history.records.last().unwrap().dc;
    assert!(last * 10.0 <= first, "L_DC {first} -> {last}");
}
