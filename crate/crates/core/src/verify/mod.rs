//! The built-in verification battery.
//!
//! Each check carries its own oracle: finite differences, brute-force loops,
//! counting, or closed forms. `seed` changes the sampled instances, never the
//! expected outcome. [`Fault::RenormalizeGates`] swaps in a combine that
//! divides gates by their kept sum; the sparsity checks still pass and the
//! combine oracle must fail.

mod gradient;
mod oracles;

use std::time::Instant;

pub use gradient::{gradient_check_config, model_gradient_check, param_group, GradientCheck, GroupGradient};
pub use oracles::{
    combine_oracle_error, group_routing_violations, ln_divergence_oracle_error, parameter_count_mismatches,
    random_config, routing_invariants, shared_ln_divergence, RoutingViolations,
};

use crate::error::Result;
use crate::moe::{balance_loss_from_stats, balance_loss_on_tape, CombineWeights, MoeSettings};
use crate::tensor::{finite_difference_gradient, relative_error, RngStream, Tape, Tensor};
use crate::train::mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    RenormalizeGates,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<22} {} ({:.2}s)\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail,
                c.seconds
            ));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out.push_str(&format!("{} checks, {failed} failed\n", self.checks.len()));
        out
    }
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("softmax", check_softmax),
    ("op-gradients", check_op_gradients),
    ("model-gradients", check_model_gradients),
    ("balance-loss", check_balance_loss),
    ("routing-sparsity", check_routing_sparsity),
    ("capacity", check_capacity),
    ("combine-oracle", check_combine),
    ("group-routing", check_group_routing),
    ("ln-divergence", check_ln_divergence),
    ("parameter-count", check_parameter_count),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check; errors inside a check count as failures.
pub fn run_battery(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport::default();
    for (name, check) in CHECKS {
        let t0 = Instant::now();
        let (passed, detail) = match check(opts) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        report.checks.push(CheckResult {
            name,
            passed,
            detail,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    report
}

fn check_softmax(o: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = RngStream::new(mix(&[o.seed, 1]));
    let mut worst: f64 = 0.0;
    let mut negative = 0;
    for _ in 0..200 {
        let n = 1 + rng.next_index(12);
        let scale = [1.0, 10.0, 700.0][rng.next_index(3)];
        let x = rng.sample_gaussian([n], 0.0, scale)?;
        let p = x.softmax(0)?;
        negative += p.data().iter().filter(|&&v| v < 0.0).count();
        worst = worst.max((p.data().iter().sum::<f64>() - 1.0).abs());
    }
    let big = Tensor::vector(vec![1000.0, 0.0])?.softmax(0)?;
    let ok = worst <= 1e-12 && negative == 0 && (big.data()[0] - 1.0).abs() < 1e-15;
    Ok((ok, format!("max |Σp − 1| = {worst:.1e}, negatives {negative}")))
}

fn check_op_gradients(o: &VerifyOptions) -> Result<(bool, String)> {
    // one composite touching every differentiable op family
    let mut rng = RngStream::new(mix(&[o.seed, 2]));
    let x0 = rng.sample_gaussian([4, 6], 0.0, 1.0)?;
    let w = rng.sample_gaussian([6, 6], 0.0, 0.5)?;
    let gamma = rng.sample_gaussian([6], 1.0, 0.2)?;
    let beta = rng.sample_gaussian([6], 0.0, 0.2)?;
    let f = |x: &Tensor, grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = if grad { tape.leaf(x.clone().with_grad()) } else { tape.constant(x.clone()) };
        let wv = tape.constant(w.clone());
        let (g, b) = (tape.constant(gamma.clone()), tape.constant(beta.clone()));
        let h = tape.layer_norm(xv, g, b, 1e-6)?;
        let q = tape.matmul(h, wv)?;
        let a = tape.attention(q, h, h, 2, 2)?;
        let a = tape.gelu(a)?;
        let s = tape.softmax(a, 1)?;
        let r = tape.gather_rows(s, &[3, 0, 1])?;
        let r = tape.scatter_rows(r, &[0, 1, 3], 4)?;
        let t = tape.transpose(r)?;
        let t = tape.reshape(t, [4, 6])?;
        let m = tape.mul(t, a)?;
        let m = tape.sub(m, h)?;
        let sel = tape.gather_elems(m, &[0, 5, 7, 11, 23])?;
        let sum = tape.sum(sel)?;
        let mean = tape.mean_axis(a, 0)?;
        let mean = tape.sum(mean)?;
        let ce = tape.cross_entropy(a, &[0, 2, 5, 1], 0.1)?;
        let l = tape.add(sum, mean)?;
        let l = tape.add(l, ce)?;
        let l = tape.scale(l, 0.7)?;
        let l = tape.add_scalar(l, 1.0)?;
        let v = tape.value(l).item()?;
        if grad {
            tape.backward(l)?;
            Ok((v, tape.grad(xv).map(<[f64]>::to_vec)))
        } else {
            Ok((v, None))
        }
    };
    let (_, analytic) = f(&x0, true)?;
    let numeric = finite_difference_gradient(|x| Ok(Tensor::scalar(f(x, false)?.0)), &x0, 1e-5)?;
    let err = relative_error(&analytic.unwrap_or_default(), numeric.data(), 1e-12);
    Ok((err <= 1e-5, format!("relative error {err:.2e}")))
}

fn check_model_gradients(o: &VerifyOptions) -> Result<(bool, String)> {
    let cfg = gradient_check_config();
    let r = model_gradient_check(&cfg, o.seed, 2, 1e-5)?;
    let worst = r.max_rel_error();
    let detail = r
        .groups
        .iter()
        .map(|g| format!("{} {:.1e}", g.group, g.rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((worst <= 1e-5 && r.routing_flips == 0, format!("{detail}; flips {}", r.routing_flips)))
}

fn check_balance_loss(o: &VerifyOptions) -> Result<(bool, String)> {
    let u = vec![0.25; 4];
    let one_hot = vec![1.0, 0.0, 0.0, 0.0];
    let uniform = balance_loss_from_stats(&u, &u)?;
    let collapse = balance_loss_from_stats(&one_hot, &one_hot)?;
    let worked = balance_loss_from_stats(&[0.75, 0.25], &[0.6, 0.4])?;
    let mut ok = (uniform - 1.0).abs() <= 1e-9 && (collapse - 4.0).abs() <= 1e-9 && (worked - 1.1).abs() <= 1e-12;

    // Cauchy–Schwarz floor on random m = P̄
    let mut rng = RngStream::new(mix(&[o.seed, 4]));
    let mut floor_violations = 0;
    for _ in 0..500 {
        let e = 1 + rng.next_index(8);
        let raw: Vec<f64> = (0..e).map(|_| rng.next_uniform()).collect();
        let s: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
        if balance_loss_from_stats(&p, &p)? < 1.0 - 1e-12 {
            floor_violations += 1;
        }
    }
    ok &= floor_violations == 0;

    // gradient through P only, against finite differences in W_f
    let (t, d, e) = (6, 3, 4);
    let x = rng.sample_gaussian([t, d], 0.0, 1.0)?;
    let w0 = rng.sample_gaussian([d, e], 0.0, 1.0)?;
    let noise_seed = mix(&[o.seed, 5]);
    let settings = MoeSettings {
        top_k: 2,
        capacity_ratio: 1.2,
        activation: Default::default(),
        combine: CombineWeights::Raw,
    };
    let eval = |w: &Tensor, grad: bool| -> Result<(f64, Option<Vec<f64>>, Vec<usize>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = if grad { tape.leaf(w.clone().with_grad()) } else { tape.constant(w.clone()) };
        let mut noise = RngStream::new(noise_seed);
        let plan = crate::moe::route_on_tape(&mut tape, xv, wv, &settings, Some(&mut noise))?;
        let l = balance_loss_on_tape(&mut tape, plan.probs, &plan.outcome)?;
        let v = tape.value(l).item()?;
        let g = if grad {
            tape.backward(l)?;
            tape.grad(wv).map(<[f64]>::to_vec)
        } else {
            None
        };
        Ok((v, g, plan.outcome.indices))
    };
    let (_, analytic, base) = eval(&w0, true)?;
    let mut flips = 0;
    let numeric = finite_difference_gradient(
        |w| {
            let (v, _, idx) = eval(w, false)?;
            if idx != base {
                flips += 1;
            }
            Ok(Tensor::scalar(v))
        },
        &w0,
        1e-6,
    )?;
    let err = relative_error(&analytic.unwrap_or_default(), numeric.data(), 1e-12);
    ok &= err <= 1e-5 && flips == 0;
    Ok((
        ok,
        format!(
            "uniform {uniform}, collapse {collapse}, worked {worked:.12}, floor violations {floor_violations}, grad rel {err:.1e}"
        ),
    ))
}

fn check_routing_sparsity(o: &VerifyOptions) -> Result<(bool, String)> {
    let v = routing_invariants(1000, o.seed)?;
    let bad = v.selection_count + v.sparsity + v.dominance + v.ties + v.normalization;
    Ok((
        bad == 0,
        format!(
            "{} instances: selection {}, sparsity {}, dominance {}, ties {}, normalization {}",
            v.instances, v.selection_count, v.sparsity, v.dominance, v.ties, v.normalization
        ),
    ))
}

fn check_capacity(o: &VerifyOptions) -> Result<(bool, String)> {
    let v = routing_invariants(1000, mix(&[o.seed, 6]))?;
    let b = crate::moe::buffer_capacity(1.2, 2, 1, 8, 4)?;
    let ok = v.capacity == 0 && b == 5;
    Ok((ok, format!("{} instances, {} over capacity; B(1.2,2,1,8,4) = {b}", v.instances, v.capacity)))
}

fn check_combine(o: &VerifyOptions) -> Result<(bool, String)> {
    let weights = match o.fault {
        Some(Fault::RenormalizeGates) => CombineWeights::Renormalized,
        None => CombineWeights::Raw,
    };
    let err = combine_oracle_error(weights, 50, o.seed)?;
    Ok((err <= 1e-12, format!("max |y − y_oracle| = {err:.1e}")))
}

fn check_group_routing(o: &VerifyOptions) -> Result<(bool, String)> {
    let mut parts = Vec::new();
    let mut total = 0;
    for g in [1, 2, 4] {
        let v = group_routing_violations(g, o.seed)?;
        total += v;
        parts.push(format!("G={g}: {v}"));
    }
    Ok((total == 0, format!("violations {}", parts.join(", "))))
}

fn check_ln_divergence(o: &VerifyOptions) -> Result<(bool, String)> {
    let err = ln_divergence_oracle_error(200, o.seed)?;
    let (yg, yb) = shared_ln_divergence(o.seed)?;
    Ok((
        err <= 1e-12 && yg == 0.0 && yb == 0.0,
        format!("max |fast − brute| = {err:.1e}; shared-LN y = ({yg}, {yb})"),
    ))
}

fn check_parameter_count(o: &VerifyOptions) -> Result<(bool, String)> {
    let bad = parameter_count_mismatches(25, o.seed)?;
    Ok((bad.is_empty(), format!("25 random configs, {} mismatches", bad.len())))
}
