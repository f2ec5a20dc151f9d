use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use placedid::conley::{conley_covariance, KernelSpec};
use placedid::sdid::{solve_unit_weights, SolverOptions};
use placedid_bench::{design, fit, sdid_problem};

fn wls(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_wls");
    for zones in [2, 5, 10] {
        let d = design(zones);
        g.bench_with_input(BenchmarkId::from_parameter(d.rows.len()), &d, |b, d| b.iter(|| fit(d)));
    }
    g.finish();
}

fn conley(c: &mut Criterion) {
    let mut g = c.benchmark_group("conley_covariance");
    g.sample_size(20);
    for zones in [2, 5, 10] {
        let f = fit(&design(zones));
        let spec = KernelSpec::default();
        g.bench_with_input(BenchmarkId::from_parameter(f.n_obs()), &f, |b, f| {
            b.iter(|| conley_covariance(f, None, &spec).unwrap())
        });
    }
    g.finish();
}

fn sdid(c: &mut Criterion) {
    let mut g = c.benchmark_group("sdid_unit_weights");
    let opts = SolverOptions::default();
    for donors in [10, 50, 200] {
        let p = sdid_problem(donors, 1);
        g.bench_with_input(BenchmarkId::from_parameter(donors), &p, |b, p| {
            b.iter(|| solve_unit_weights(p, 0.1, &opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, wls, conley, sdid);
criterion_main!(benches);
