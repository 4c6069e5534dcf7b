//! Finite-difference suites over every differentiable piece, on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{finite_diff_check, Bound, FdReport, ParamStore, Tape, Tensor, Var};
use crate::baselines::{Direct, DirectConfig, DirectMethod};
use crate::data::{normalize, synth_drift, SynthConfig};
use crate::error::Result;
use crate::l1::{agc, L1Config, L1};
use crate::l2::{GraphFnKind, L2Config, L2};
use crate::path::{GradMode, SolverConfig, VectorField};
use crate::target::{build_param_graph, forecast, init_params, TargetArch, TargetKind, WindowInput};
use crate::train::{make_pairs, HyperGpa, Pairs, PeriodBatch};

/// Max relative error of one suite against its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tol: f64,
    pub entries: usize,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub const MODULE_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const EPS: f64 = 1e-6;

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn suite(name: impl Into<String>, tol: f64, r: FdReport) -> SuiteResult {
    SuiteResult {
        name: name.into(),
        max_rel_err: r.max_rel_err,
        max_abs_err: r.max_abs_err,
        tol,
        entries: r.entries,
    }
}

fn weighted<'t>(tape: &'t Tape, v: Var<'t>, w: &Tensor) -> Var<'t> {
    v.mul(tape.constant(w.clone())).sum()
}

fn targets(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteResult>) -> Result<()> {
    let solver = SolverConfig {
        steps_per_interval: 2,
        mode: GradMode::Backprop,
    };
    for kind in TargetKind::ALL {
        let arch = TargetArch::new(kind, 2, 3, 3, 2);
        let graph = build_param_graph(&arch);
        let params = init_params(&graph, rng);
        let x = rand_t(&[2, 3, 2], rng);
        let w = rand_t(&[2, 2, 2], rng);
        let r = finite_diff_check(
            |tape, vars| {
                let y = forecast(&graph, vars, &WindowInput::new(x.clone())?, &solver)?;
                Ok(weighted(tape, y, &w))
            },
            &params,
            EPS,
        )?;
        out.push(suite(format!("target.{kind}"), MODULE_TOL, r));
    }
    Ok(())
}

fn l1_suites(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteResult>) -> Result<()> {
    let p = vec![
        rand_t(&[3, 4], rng),
        rand_t(&[3, 2], rng),
        rand_t(&[4, 5], rng),
        rand_t(&[5], rng),
    ];
    let w = rand_t(&[3, 5], rng);
    let r = finite_diff_check(
        |tape, v| {
            let y = agc(v[0], v[1], v[2], v[3])?;
            Ok(weighted(tape, y, &w))
        },
        &p,
        EPS,
    )?;
    out.push(suite("l1.agc", MODULE_TOL, r));

    let cfg = L1Config {
        hidden: 3,
        gamma_hidden: 4,
        embed_dim: 2,
        ..L1Config::new(2)
    };
    let mut store = ParamStore::new();
    let l1 = L1::new(cfg, 2, &mut store, rng)?;
    let state = rand_t(&[2, 3], rng);
    let field: Vec<Tensor> = l1.field_ids().iter().map(|&id| store.get(id).clone()).collect();
    let w = rand_t(&[2, 3, 2], rng);
    let r = finite_diff_check(
        |tape, vars| {
            let f = l1.field().eval(tape, tape.constant(state.clone()), vars)?;
            Ok(weighted(tape, f, &w))
        },
        &field,
        EPS,
    )?;
    out.push(suite("l1.field", MODULE_TOL, r));

    let series = vec![rand_t(&[5, 2], rng), rand_t(&[5, 2], rng)];
    let w = rand_t(&[2, 3], rng);
    for mode in [GradMode::Backprop, GradMode::Adjoint] {
        let solver = SolverConfig {
            // the adjoint integrates the continuous problem backwards, so it
            // agrees with differences of the discrete forward pass only on a fine grid
            steps_per_interval: if mode == GradMode::Adjoint { 48 } else { 2 },
            mode,
        };
        let r = finite_diff_check(
            |tape, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                Ok(weighted(tape, l1.encode(tape, &bound, &series, &solver)?, &w))
            },
            store.tensors(),
            1e-5,
        )?;
        let name = if mode == GradMode::Adjoint {
            "l1.encode.adjoint"
        } else {
            "l1.encode"
        };
        out.push(suite(name, MODULE_TOL, r));
    }
    Ok(())
}

fn l2_suites(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteResult>) -> Result<()> {
    let arch = TargetArch::new(TargetKind::Gru, 2, 3, 3, 2);
    let graph = build_param_graph(&arch);
    for kind in [GraphFnKind::Gat, GraphFnKind::Gcn, GraphFnKind::Agc] {
        let cfg = L2Config {
            query_dim: 6,
            refined_dim: 4,
            heads: 2,
            layers: 2,
            hidden: 4,
            candidates: 3,
            graph_fn: kind,
            embed_dim: 2,
        };
        let mut store = ParamStore::new();
        let l2 = L2::new(cfg, &graph, 3, &mut store, rng)?;
        let h = rand_t(&[1, 3], rng);
        let ws: Vec<Tensor> = graph.nodes.iter().map(|n| rand_t(&n.shape, rng)).collect();
        let r = finite_diff_check(
            |tape, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                let g = l2.generate(&bound, tape.constant(h.clone()))?;
                let mut total = tape.scalar(0.0);
                for (p, w) in g.blended.iter().zip(&ws) {
                    total = total.add(weighted(tape, *p, w));
                }
                Ok(total)
            },
            store.tensors(),
            EPS,
        )?;
        out.push(suite(format!("l2.generate.{}", kind.as_str()), MODULE_TOL, r));
    }
    Ok(())
}

fn loss_suites(seed: u64, out: &mut Vec<SuiteResult>) -> Result<()> {
    let synth = synth_drift(&SynthConfig {
        series: 2,
        periods: 4,
        period_len: 8,
        dim: 2,
        seed,
        ..SynthConfig::default()
    })?;
    let (corpus, _) = normalize(&synth.corpus)?;
    let arch = TargetArch::new(TargetKind::Gru, 2, 3, 3, 2);
    for (name, lambda) in [("loss.mse1", 0.0), ("loss.mse1+mse2", 0.1)] {
        let mut cfg = crate::train::HyperGpaConfig::new(arch, 2);
        cfg.l1 = L1Config {
            hidden: 3,
            gamma_hidden: 3,
            embed_dim: 2,
            ..L1Config::new(2)
        };
        cfg.l2 = L2Config {
            query_dim: 6,
            refined_dim: 4,
            heads: 2,
            layers: 2,
            hidden: 4,
            candidates: 2,
            graph_fn: GraphFnKind::Gat,
            embed_dim: 2,
        };
        cfg.train.lambda = lambda;
        cfg.train.seed = seed;
        cfg.train.solver.steps_per_interval = 1;
        let model = HyperGpa::new(cfg)?;
        let batch = PeriodBatch::for_target(2, 2)?;
        let pairs: Vec<Pairs> = (0..2)
            .map(|i| Ok(make_pairs(corpus.period(i, 2), 3, 2)?.subset(&[0, 2])))
            .collect::<Result<_>>()?;
        let r = finite_diff_check(
            |tape, vars| {
                let bound = Bound::from_vars(vars.to_vec());
                model.batch_loss(tape, &bound, &corpus, &batch, &pairs).map(|r| r.0)
            },
            model.store.tensors(),
            EPS,
        )?;
        out.push(suite(name, END_TO_END_TOL, r));
    }
    Ok(())
}

fn baseline_suites(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteResult>) -> Result<()> {
    let x = rand_t(&[2, 3, 2], rng);
    let y = rand_t(&[2, 2, 2], rng);
    for method in [DirectMethod::Revin, DirectMethod::HyperGru] {
        let mut cfg = DirectConfig::new(method, TargetArch::new(TargetKind::Gru, 2, 3, 3, 2), 1);
        cfg.train.seed = rng.gen();
        let model = Direct::new(cfg)?;
        let r = finite_diff_check(
            |tape, vars| Ok(model.forecast_series(tape, vars, &x)?.mse(tape.constant(y.clone()))),
            model.store.tensors(),
            EPS,
        )?;
        out.push(suite(format!("baseline.{method}"), MODULE_TOL, r));
    }
    Ok(())
}

pub fn run_suites(seed: u64) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    targets(&mut rng, &mut out)?;
    l1_suites(&mut rng, &mut out)?;
    l2_suites(&mut rng, &mut out)?;
    baseline_suites(&mut rng, &mut out)?;
    loss_suites(seed, &mut out)?;
    Ok(out)
}
