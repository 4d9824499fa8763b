//! Finite-difference and adjoint checks shared by the gradient tests and the
//! acceptance runner. Each check returns the first failure as a message.

use std::sync::Arc;

use super::*;
use sfi_separation::filter_design::KernelSolver;
use sfi_separation::loss_metrics::{pit_loss_graph, Targets, DEFAULT_EPS, DEFAULT_TAU};
use sfi_separation::network::{build_model, ModelConfig, SeparationModel};
use sfi_separation::sfi_layers::kernel_weights_var;
use sfi_separation::tensor::{conv1d, conv_transpose1d, Axis, Graph, Shape, Tensor, Var};

pub const TOL: f64 = 1e-4;
pub const ADJOINT_TOL: f64 = 1e-6;

pub type Outcome = Result<(), String>;
pub type Check = (&'static str, fn() -> Outcome);

fn check(name: &str, inputs: &[Tensor], f: Builder) -> Outcome {
    let err = gradient_check(inputs, f, 1e-6, 64, 7);
    if err <= TOL {
        Ok(())
    } else {
        Err(format!("{name}: relative error {err:.3e}"))
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Outcome {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn convolutions() -> Outcome {
    let mut r = rng(1);
    let x = random_tensor(&mut r, Shape::new(2, 4, 11), 1.0);
    let w = random_tensor(&mut r, Shape::new(6, 2, 3), 1.0);
    check("conv1d groups=2 stride=2 pad=1", &[x.clone(), w], &|g, v| {
        let y = g.conv1d(v[0], v[1], 2, 1, 2).unwrap();
        project(g, y, 3)
    })?;
    let dw = random_tensor(&mut r, Shape::new(4, 1, 5), 1.0);
    check("depthwise conv1d", &[x.clone(), dw], &|g, v| {
        let y = g.conv1d(v[0], v[1], 2, 2, 4).unwrap();
        project(g, y, 4)
    })?;
    let wt = random_tensor(&mut r, Shape::new(4, 3, 5), 1.0);
    check("conv_transpose1d", &[x, wt], &|g, v| {
        let y = g.conv_transpose1d(v[0], v[1], 3).unwrap();
        project(g, y, 5)
    })
}

pub fn normalization_and_activations() -> Outcome {
    let mut r = rng(2);
    let x = away_from_zero(&mut r, Shape::new(2, 3, 7), 0.05);
    let gain = random_tensor(&mut r, Shape::new(1, 3, 1), 1.0);
    let bias = random_tensor(&mut r, Shape::new(1, 3, 1), 1.0);
    check("global layer norm", &[x.clone(), gain, bias], &|g, v| {
        let y = g.global_layer_norm(v[0], v[1], v[2], 1e-8).unwrap();
        project(g, y, 6)
    })?;
    check("relu", &[x.clone()], &|g, v| {
        let y = g.relu(v[0]);
        project(g, y, 7)
    })?;
    let slope = random_tensor(&mut r, Shape::new(1, 3, 1), 0.5);
    check("prelu", &[x.clone(), slope], &|g, v| {
        let y = g.prelu(v[0], v[1]).unwrap();
        project(g, y, 8)
    })?;
    check("sigmoid", &[x], &|g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 9)
    })
}

pub fn pointwise_and_broadcast() -> Outcome {
    let mut r = rng(3);
    let a = random_tensor(&mut r, Shape::new(2, 3, 4), 1.0);
    let b = random_tensor(&mut r, Shape::new(1, 3, 1), 1.0);
    let c = random_tensor(&mut r, Shape::new(2, 1, 4), 1.0);
    check("add broadcast", &[a.clone(), b], &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        project(g, y, 10)
    })?;
    check("sub broadcast", &[c.clone(), a.clone()], &|g, v| {
        let y = g.sub(v[0], v[1]).unwrap();
        project(g, y, 11)
    })?;
    check("mul broadcast", &[a.clone(), c], &|g, v| {
        let y = g.mul(v[0], v[1]).unwrap();
        project(g, y, 12)
    })?;
    check("scale and add_scalar", &[a.clone()], &|g, v| {
        let y = g.scale(v[0], -2.5);
        let y = g.add_scalar(y, 0.75);
        project(g, y, 13)
    })?;
    let pos = Tensor::from_vec(a.shape(), a.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    check("ln", &[pos], &|g, v| {
        let y = g.ln(v[0]).unwrap();
        project(g, y, 14)
    })?;
    check("sum of squares", &[a], &|g, v| {
        let y = g.mul(v[0], v[0]).unwrap();
        g.sum(y)
    })
}

pub fn shape_ops() -> Outcome {
    let mut r = rng(4);
    let x = random_tensor(&mut r, Shape::new(2, 3, 5), 1.0);
    check("upsample2", &[x.clone()], &|g, v| {
        let y = g.upsample2(v[0]);
        project(g, y, 15)
    })?;
    check("fit_time trim", &[x.clone()], &|g, v| {
        let y = g.fit_time(v[0], 3);
        project(g, y, 16)
    })?;
    check("fit_time pad", &[x.clone()], &|g, v| {
        let y = g.fit_time(v[0], 8);
        project(g, y, 17)
    })?;
    for (axis, start) in [(Axis::Batch, 1), (Axis::Channel, 1), (Axis::Time, 2)] {
        check("narrow", &[x.clone()], &move |g, v| {
            let y = g.narrow(v[0], axis, start, 1).unwrap();
            project(g, y, 18)
        })?;
    }
    check("reshape", &[x], &|g, v| {
        let y = g.reshape(v[0], Shape::new(1, 6, 5)).unwrap();
        project(g, y, 19)
    })
}

pub fn kernel_generation() -> Outcome {
    let solver = Arc::new(KernelSolver::new(8000.0, 12, 40).unwrap());
    let mu = Tensor::from_vec(Shape::new(1, 3, 1), vec![3000.0, 9000.0, 17000.0]).unwrap();
    let sigma = Tensor::from_vec(Shape::new(1, 3, 1), vec![400.0, 900.0, 2500.0]).unwrap();
    let phi = Tensor::from_vec(Shape::new(1, 3, 1), vec![0.3, -1.2, 2.0]).unwrap();
    let f = move |g: &mut Graph, v: &[Var]| {
        let w = kernel_weights_var(g, v[0], v[1], v[2], Arc::clone(&solver)).unwrap();
        project(g, w, 20)
    };
    let err = gradient_check(&[mu, sigma, phi], &f, 1e-4, 64, 21);
    ensure(err <= TOL, || format!("kernel generation: relative error {err:.3e}"))
}

pub fn conv_adjoints() -> Outcome {
    let mut r = rng(5);
    for (cin, cout, k, s, t) in [(1, 4, 8, 4, 9), (3, 2, 5, 2, 7), (2, 2, 3, 1, 10)] {
        let len = (t - 1) * s + k;
        let x = random_tensor(&mut r, Shape::new(2, cin, len), 1.0);
        let w = random_tensor(&mut r, Shape::new(cout, cin, k), 1.0);
        let y = random_tensor(&mut r, Shape::new(2, cout, t), 1.0);
        let lhs = dot(conv1d(&x, &w, s, 0, 1).unwrap().data(), y.data());
        let back = conv_transpose1d(&y, &w, s).unwrap();
        let rhs = dot(x.data(), back.data());
        ensure(rel_err(lhs, rhs) <= ADJOINT_TOL, || format!("conv adjoint: {lhs} vs {rhs}"))?;

        // backward of conv1d with respect to its input is the same adjoint
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let out = g.conv1d(xv, wv, s, 0, 1).unwrap();
        let yv = g.constant(y.clone());
        let prod = g.mul(out, yv).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(xv).unwrap();
        let worst = gx.data().iter().zip(back.data()).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
        ensure(worst <= ADJOINT_TOL, || format!("conv input gradient vs transposed conv: {worst:.3e}"))?;
    }
    Ok(())
}

pub fn toy_model() -> SeparationModel {
    build_model(ModelConfig {
        channels: 4,
        bottleneck: 4,
        expanded: 4,
        blocks: 1,
        outputs: 3,
        fs_train: 8000,
        kernel_size: 8,
        stride: 4,
        grid_size: 32,
        seed: 11,
    })
    .unwrap()
}

pub fn u_conv_block() -> Outcome {
    let model = toy_model();
    let mut r = rng(6);
    let mut inputs = vec![random_tensor(&mut r, Shape::new(1, 4, 32), 1.0)];
    inputs.extend(model.param_ids().map(|id| model.param(id).clone()));
    let f = |g: &mut Graph, v: &[Var]| {
        let bound = model.bind_vars(v[1..].to_vec()).unwrap();
        let y = model.u_conv_block_var(g, &bound, 0, v[0]).unwrap();
        project(g, y, 22)
    };
    let err = gradient_check(&inputs, &f, 1e-6, 0, 23);
    ensure(err <= TOL, || format!("u-conv block: relative error {err:.3e}"))
}

fn network_loss(model: &SeparationModel, g: &mut Graph, mixtures: &[Vec<f64>], targets: &[Targets]) -> (Var, Vec<Var>) {
    let bound = model.bind(g, true);
    let y = model.forward(g, &bound, mixtures, 8000).unwrap();
    let (loss, _) = pit_loss_graph(g, y, targets, DEFAULT_EPS, DEFAULT_TAU).unwrap();
    (loss, bound.vars().to_vec())
}

/// Whole toy network under the PIT loss: latent filters receive gradient and
/// every parameter tensor passes a directional finite-difference check.
pub fn full_network() -> Outcome {
    let model = toy_model();
    let mut r = rng(8);
    let len = 100;
    let targets: Vec<Targets> = (0..2)
        .map(|b| {
            let sources: Vec<Vec<f64>> = (0..1 + b).map(|_| random_tensor(&mut r, Shape::new(1, 1, len), 0.5).into_data()).collect();
            Targets {
                mixture: (0..len).map(|t| sources.iter().map(|s| s[t]).sum()).collect(),
                sources,
            }
        })
        .collect();
    let mixtures: Vec<Vec<f64>> = targets.iter().map(|t| t.mixture.clone()).collect();

    let mut g = Graph::new();
    let (loss, vars) = network_loss(&model, &mut g, &mixtures, &targets);
    let grads = g.backward(loss).unwrap();

    for decoder in [false, true] {
        for id in model.mgf_ids(decoder) {
            let gr = grads.get(vars[id.index()]).unwrap();
            ensure(gr.data().iter().any(|&v| v != 0.0), || format!("{} has zero gradient", model.param_name(id)))?;
        }
    }

    let mut dir_rng = rng(9);
    for id in model.param_ids().collect::<Vec<_>>() {
        let base = model.param(id).clone();
        let scale = base.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let h = 1e-6 * scale;
        let dir = random_tensor(&mut dir_rng, base.shape(), 1.0);
        let eval = |sign: f64| {
            let mut m = model.clone();
            for (p, d) in m.param_mut(id).data_mut().iter_mut().zip(dir.data()) {
                *p += sign * h * d;
            }
            let mut g = Graph::new();
            let (l, _) = network_loss(&m, &mut g, &mixtures, &targets);
            g.value(l).item()
        };
        let numeric = (eval(1.0) - eval(-1.0)) / (2.0 * h);
        let exact = dot(grads.get(vars[id.index()]).unwrap().data(), dir.data());
        let e = rel_err(exact, numeric);
        ensure(e <= TOL, || format!("{}: analytic {exact:.6e} numeric {numeric:.6e}", model.param_name(id)))?;
    }
    Ok(())
}

/// Every check in order, with a label for reporting.
pub fn all() -> Vec<Check> {
    vec![
        ("convolutions", convolutions),
        ("normalization and activations", normalization_and_activations),
        ("pointwise and broadcast", pointwise_and_broadcast),
        ("shape ops", shape_ops),
        ("kernel generation", kernel_generation),
        ("conv adjoints", conv_adjoints),
        ("u-conv block", u_conv_block),
        ("full network", full_network),
    ]
}
