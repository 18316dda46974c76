use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use gradphi::gibbs::{run_mcmc, McmcParams};
use gradphi::{build_frd, green_kernel, ModelSpec, PotentialSpec};
use gradphi_bench::{bench_q, planar_torus};

fn kernels(c: &mut Criterion) {
    let mut g = c.benchmark_group("green_kernel");
    for n in [3, 4, 5] {
        let t = planar_torus(n);
        g.bench_function(format!("side_{}", t.side()), |b| {
            b.iter(|| green_kernel(&bench_q(), &t).unwrap())
        });
    }
    g.finish();
}

fn decomposition(c: &mut Criterion) {
    let mut g = c.benchmark_group("build_frd");
    for n in [3, 4] {
        let t = planar_torus(n);
        let kernel = green_kernel(&bench_q(), &t).unwrap();
        g.bench_function(format!("side_{}", t.side()), |b| {
            b.iter(|| build_frd(&kernel, &t).unwrap())
        });
    }
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let t = planar_torus(3);
    let model = ModelSpec::new(t, PotentialSpec::quartic(0.05), vec![0.0; 2], 25.0).unwrap();
    let params = McmcParams {
        sweeps: 100,
        thin: 1,
        burn_in: Some(0),
        chains: 1,
        batches: 20,
    };
    c.bench_function("mcmc_100_sweeps_side_27", |b| {
        b.iter_batched(
            || params.clone(),
            |p| run_mcmc(&model, &p, 1).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, kernels, decomposition, sampler);
criterion_main!(benches);
