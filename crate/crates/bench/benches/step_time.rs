use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dampc_core::datagen::{integrate, observation, NormStats};
use dampc_core::diffusion::{
    sample_plan, DenoiseConfig, DenoiserDims, DiffusionModel, NoiseSchedule,
};
use dampc_core::kinematics::end_effector;
use dampc_core::nlp::{expert_solve, solve_local, stream_rng, warm_start_shift, OcpConfig};
use dampc_core::nn::Activation;
use dampc_core::selection::{sample_batch, select, OcpContext, SelectionConfig, Strategy};
use dampc_core::ArmModel;

struct Problem {
    arm: ArmModel,
    ocp: OcpConfig,
    x0: Vec<f64>,
}

fn problem() -> Problem {
    let arm = ArmModel::desk();
    let ocp = OcpConfig::desk(arm.dof());
    Problem {
        arm,
        ocp,
        x0: vec![0.2, -0.4, 0.6],
    }
}

fn mpc(c: &mut Criterion) {
    let p = problem();
    let yd = end_effector(&p.arm, &[0.9, 0.5, -0.8]).unwrap();
    let mut rng = stream_rng(1, 0);
    let first = expert_solve(&p.ocp, &p.arm, &p.x0, &yd, None, 8, &mut rng).unwrap();
    let u0 = &first.xi.u[..p.arm.dof()];
    let x1 = integrate(&p.arm, &p.x0, u0, p.ocp.dt);
    let warm = warm_start_shift(&first);
    c.bench_function("mpc/warm_started_solve", |b| {
        b.iter(|| solve_local(&p.ocp, &p.arm, &x1, &yd, &warm).unwrap())
    });
}

fn diffusion_model(p: &Problem, hidden: &[usize]) -> DiffusionModel {
    let plan_dim = p.ocp.horizon * p.arm.dof();
    let obs_dim = observation(&p.x0, &end_effector(&p.arm, &p.x0).unwrap()).len();
    let dims = DenoiserDims {
        plan_dim,
        obs_dim,
        time_dim: 64,
    };
    DiffusionModel::new(
        NoiseSchedule::cosine(5).unwrap(),
        dims,
        hidden,
        Activation::Gelu,
        0,
        NormStats::identity(obs_dim, plan_dim),
    )
    .unwrap()
}

// Sampling cost does not depend on the weights, so an untrained net is timed.
fn diffusion(c: &mut Criterion) {
    let p = problem();
    let yd = end_effector(&p.arm, &[0.9, 0.5, -0.8]).unwrap();
    let obs = observation(&p.x0, &yd);
    let cfg = DenoiseConfig::default();
    let mut group = c.benchmark_group("ddpm5");
    for hidden in [vec![256; 3], vec![256; 5]] {
        let model = diffusion_model(&p, &hidden);
        let id = format!("{}x{}", hidden.len(), hidden[0]);
        group.bench_function(BenchmarkId::new("single_sample", &id), |b| {
            b.iter(|| sample_plan(&model, &cfg, &obs, None, p.arm.dof(), 0).unwrap())
        });
        let sel = SelectionConfig {
            strategy: Strategy::Cost,
            ..SelectionConfig::default()
        };
        let ctx = OcpContext {
            cfg: &p.ocp,
            model: &p.arm,
            x0: &p.x0,
            yd: &yd,
        };
        group.bench_function(BenchmarkId::new("batch_and_select", &id), |b| {
            let mut rng = stream_rng(2, 0);
            b.iter(|| {
                let batch =
                    sample_batch(&model, &cfg, &obs, None, p.arm.dof(), sel.batch_size, 0).unwrap();
                select(&sel, &batch, &ctx, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = mpc, diffusion
}
criterion_main!(benches);
