use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mfgms::assembly::assemble_reduced;
use mfgms::grid::{ChannelPreset, CoefficientField, FineGrid, InitialCondition, ProblemSpec, SourceKind, Velocity};
use mfgms::linalg::banded::BandedLu;
use mfgms::linalg::dense::eig_sym_generalized_lowest;
use mfgms::pointcloud::{cvt_points, solve_density, CvtParams};
use nalgebra::DMatrix;

fn field() -> CoefficientField {
    CoefficientField::new(1000.0, &ChannelPreset::PaperLike, 1.0, Velocity::Shear).unwrap()
}

fn assembly(c: &mut Criterion) {
    let grid = FineGrid::new(12).unwrap();
    let f = field();
    c.bench_function("assemble_reduced n=12", |b| b.iter(|| assemble_reduced(black_box(&grid), &f).unwrap()));
}

fn banded(c: &mut Criterion) {
    let grid = FineGrid::new(12).unwrap();
    let ops = assemble_reduced(&grid, &field()).unwrap();
    let k = ops.mass.add_scaled(&ops.transport(), 0.004);
    c.bench_function("banded LU factor n=12", |b| b.iter(|| BandedLu::factor(black_box(&k)).unwrap()));
    let lu = BandedLu::factor(&k).unwrap();
    let rhs = vec![1.0; k.n_rows()];
    c.bench_function("banded LU solve n=12", |b| b.iter(|| lu.solve(black_box(&rhs))));
}

fn eig(c: &mut Criterion) {
    let n = 400;
    let x = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5);
    let a = &x * x.transpose();
    let b = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else if i.abs_diff(j) == 1 { 0.5 } else { 0.0 });
    let mut group = c.benchmark_group("generalized eigen");
    group.sample_size(10);
    group.bench_function("lowest 20 of 400", |bch| bch.iter(|| eig_sym_generalized_lowest(black_box(&a), &b, 20).unwrap()));
    group.finish();
}

fn cvt(c: &mut Criterion) {
    let grid = FineGrid::new(10).unwrap();
    let spec = ProblemSpec::new(SourceKind::F1, InitialCondition::Bubble, 0.2).unwrap();
    let density = solve_density(&grid, &field(), &spec, 0.1, 1e-4).unwrap();
    let params = CvtParams {
        iterations: 10,
        samples: 5000,
        ..CvtParams::desk()
    };
    let mut group = c.benchmark_group("cvt");
    group.sample_size(10);
    group.bench_function("64 points, 10 iterations", |b| b.iter(|| cvt_points(&grid, &density, 64, &params, 1).unwrap()));
    group.finish();
}

criterion_group!(benches, assembly, banded, eig, cvt);
criterion_main!(benches);
