use criterion::{criterion_group, criterion_main, Criterion};
use maryland_core::rng::substream;
use maryland_core::{
    cwb_solve, diagonalize_and_relabel, ldt_probe, linearized_operator, nonlinear_term, Anchor,
    Coeffs, LdtConfig, MarylandParams, ModeIndex, Region, ResonantSet, Sign, Site, SolverConfig,
};
use num_complex::Complex64;
use rand::Rng;

fn bench_eigensolve(c: &mut Criterion) {
    let params = MarylandParams::golden(1, 0.05, 0.3);
    let spatial_box = Region::centered_box(1, 12);
    c.bench_function("diagonalize_radius_12", |b| {
        b.iter(|| diagonalize_and_relabel(&params, &spatial_box).unwrap())
    });
}

fn dense_coeffs(radius: i64, scale: f64) -> Coeffs {
    let mut rng = substream(3, "bench-coeffs");
    let mut u = Coeffs::new(1, 1, radius, radius);
    for n in -radius..=radius {
        for j in -radius..=radius {
            let damp = scale / (1.0 + (n.abs() + j.abs()) as f64);
            let val =
                Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * damp;
            u.set(vec![n], vec![j], val);
        }
    }
    u
}

fn bench_nonlinear_term(c: &mut Criterion) {
    let params = MarylandParams::golden(1, 0.02, 0.3);
    let eigsys = diagonalize_and_relabel(&params, &Region::centered_box(1, 8)).unwrap();
    let u = dense_coeffs(6, 0.4);
    c.bench_function("nonlinear_term_radius_6", |b| {
        b.iter(|| nonlinear_term(&u, &eigsys, 1, (18, 6), true).unwrap())
    });
}

fn bench_linearized_operator(c: &mut Criterion) {
    let params = MarylandParams::golden(1, 0.02, 0.3);
    let eigsys = diagonalize_and_relabel(&params, &Region::centered_box(1, 8)).unwrap();
    let u = dense_coeffs(4, 0.3);
    let omega = vec![0.71];
    let mut modes = Vec::new();
    for sign in [Sign::Plus, Sign::Minus] {
        for n in -4..=4i64 {
            for j in -4..=4i64 {
                modes.push(ModeIndex::new(sign, vec![n], Site::new(vec![j])));
            }
        }
    }
    c.bench_function("linearized_operator_162_modes", |b| {
        b.iter(|| linearized_operator(&u, &eigsys, 1, &omega, 1e-3, 0.0, &modes).unwrap())
    });
}

fn bench_ldt_probe(c: &mut Criterion) {
    let params = MarylandParams::golden(1, 0.02, 0.3);
    let eigsys = diagonalize_and_relabel(&params, &Region::centered_box(1, 12)).unwrap();
    let rs = ResonantSet::new(vec![Anchor {
        beta: vec![0],
        a: 1.3,
    }])
    .unwrap();
    let report = cwb_solve(&eigsys, &SolverConfig::desk(rs, 1e-3)).unwrap();
    let u = Coeffs::from_data(&report.u);
    let cfg = LdtConfig {
        p: 1,
        delta: 1e-3,
        sigma_samples: 50,
        seed: 11,
        sampled_columns: 8,
        ..LdtConfig::default()
    };
    c.bench_function("ldt_probe_scale_6_50_sigmas", |b| {
        b.iter(|| ldt_probe(&u, &eigsys, &report.omega, 6, &[vec![0]], &cfg).unwrap())
    });
}

criterion_group!(
    benches,
    bench_eigensolve,
    bench_nonlinear_term,
    bench_linearized_operator,
    bench_ldt_probe
);
criterion_main!(benches);
