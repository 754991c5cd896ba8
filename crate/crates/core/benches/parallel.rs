use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vanishcost_core::costlab::{CostParams, Instance, ProblemSpec};
use vanishcost_core::flow::{check_flushing, FlowOptions, FlushingParams, Lattice};
use vanishcost_core::geometry::{Domain, Region};
use vanishcost_core::velocity::builtin_field;
use vanishcost_core::Execution;

const POLICIES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn flushing_lattice(c: &mut Criterion) {
    let field = builtin_field("quadratic_potential", 2).unwrap();
    let domain = Domain::disk([0.0, 0.0], 1.0).unwrap();
    let target = Region::ball(&[0.0, 0.0], 0.25).unwrap();
    let params = FlushingParams { t_end: 4.0, t0_window: 2.0, r0: 0.05 };
    let lattice = Lattice::new(21, 5);
    let opts = FlowOptions::default();

    let mut group = c.benchmark_group("flushing_21x21x5");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| check_flushing(&field, &domain, &target, &params, &lattice, &opts, exec).unwrap());
        });
    }
    group.finish();
}

fn dense_columns(c: &mut Criterion) {
    let problem = ProblemSpec {
        domain: Domain::interval(-1.0, 1.0).unwrap(),
        omega: Region::interval(-0.3, 0.3).unwrap(),
        field: builtin_field("quadratic_potential", 1).unwrap(),
        t_end: 1.0,
        epsilon: 0.1,
    };
    let inst = Instance::new(&problem, &CostParams::new(&[120], 120)).unwrap();

    let mut group = c.benchmark_group("dense_forms_n120_m120");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| inst.dense_forms(0, exec).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, flushing_lattice, dense_columns);
criterion_main!(benches);
