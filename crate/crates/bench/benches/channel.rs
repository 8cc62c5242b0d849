//! Hot-path benchmarks: channel construction, control selection, and full
//! interaction intervals.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use qdc_core::control::{ControlCoupling, ControlProblem, IntervalDistribution};
use qdc_core::discrete::{build_kraus, step_interval, ActionProjectors, KrausMode};
use qdc_core::engine::{run_trajectory, Policy, ScenarioConfig};
use qdc_core::linalg::random_density;
use qdc_core::model::{BehaviorParams, BeliefVector, DecisionModel, DensityOperator, ModelDims, UtilityTable};

fn default_model() -> DecisionModel {
    DecisionModel::new(
        ModelDims::new(2, 2).unwrap(),
        BehaviorParams::new(0.3, 1.0, 0.5).unwrap(),
        UtilityTable::new(ndarray_from(vec![vec![2.0, 1.0], vec![1.0, 2.0]])).unwrap(),
    )
    .unwrap()
}

fn ndarray_from(rows: Vec<Vec<f64>>) -> ndarray::Array2<f64> {
    let r = rows.len();
    let c = rows[0].len();
    ndarray::Array2::from_shape_fn((r, c), |(i, j)| rows[i][j])
}

fn bench_kraus_build(c: &mut Criterion) {
    let model = default_model();
    let eta = BeliefVector::uniform(2);
    let gen = model.generator(&eta).unwrap();
    c.bench_function("build_kraus_exact_cptp", |b| {
        b.iter(|| build_kraus(black_box(&gen), 0.3, 2, 0.01, KrausMode::exact_cptp()).unwrap())
    });
    c.bench_function("build_kraus_paper_faithful", |b| {
        b.iter(|| build_kraus(black_box(&gen), 0.0, 2, 0.01, KrausMode::PaperFaithful).unwrap())
    });
}

fn bench_control(c: &mut Criterion) {
    let model = default_model();
    let coupling = ControlCoupling::centered(2);
    let pi_t = IntervalDistribution::uniform(&[1, 2, 3]).unwrap();
    let problem = ControlProblem::new(&model, &coupling, &pi_t, 0.01, KrausMode::exact_cptp());
    let eta = BeliefVector::uniform(2);
    let solution = problem.select_sigma(&eta, 0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rho = DensityOperator::new(random_density(4, &mut rng)).unwrap();

    c.bench_function("expected_v", |b| {
        b.iter(|| {
            problem
                .expected_v(black_box(&rho), &eta, 0.37, &solution.spec)
                .unwrap()
        })
    });
    c.bench_function("select_control_grid41", |b| {
        b.iter(|| {
            problem
                .select_control(black_box(&rho), &eta, &solution.spec, 41)
                .unwrap()
        })
    });
}

fn bench_interval_step(c: &mut Criterion) {
    let model = default_model();
    let eta = BeliefVector::uniform(2);
    let gen = model.generator(&eta).unwrap();
    let ks = build_kraus(&gen, 0.2, 2, 0.01, KrausMode::exact_cptp()).unwrap();
    let proj = ActionProjectors::new(model.dims());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rho = DensityOperator::maximally_mixed(4);
    c.bench_function("step_interval", |b| {
        b.iter(|| step_interval(black_box(&rho), &ks, &proj, &mut rng).unwrap())
    });
}

fn bench_trajectory(c: &mut Criterion) {
    let mut cfg = ScenarioConfig::default_scenario();
    cfg.horizon = 50;
    let scenario = cfg.build().unwrap();
    let solution = scenario.solve_sigma().unwrap();
    let mut group = c.benchmark_group("trajectory");
    group.sample_size(10);
    group.bench_function("closed_loop_50_interactions", |b| {
        b.iter(|| run_trajectory(&scenario, &solution.spec, 7, Policy::ClosedLoop).unwrap())
    });
    group.bench_function("open_loop_50_interactions", |b| {
        b.iter(|| run_trajectory(&scenario, &solution.spec, 7, Policy::OpenLoop).unwrap())
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_kraus_build,
    bench_control,
    bench_interval_step,
    bench_trajectory
);
criterion_main!(benches);
