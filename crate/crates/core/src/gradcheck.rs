//! Registered gradient cases: every differentiable op and composite block,
//! checked at 64-bit against central differences.
//!
//! Parameters are drawn away from their deployment initialization (larger
//! magnitudes, non-zero biases) so gradients are well above round-off.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::blocks::ChannelAttention;
use crate::backbone::window::{AttentionLayout, WindowLayout};
use crate::backbone::{BlockDims, BranchMode, DualBranchBlock, SingleBranchBlock};
use crate::coords::CellSize;
use crate::error::Result;
use crate::grad::{check_gradients, GradCase, GradReport, Graph, ParamStore, Var};
use crate::model::{Model, ModelConfig};
use crate::nn::{ConvIds, Initializer, LinearIds, LinearInit, Mlp, NormIds};
use crate::numerics::Activation;
use crate::tensor::Tensor;
use crate::upsampler::{Reweight, Upsampler, UpsamplerConfig, Variant};

/// Pass threshold on the maximum relative error.
pub const GRAD_TOL: f64 = 1e-4;

type Setup = Box<dyn Fn(u64) -> ParamStore<f64> + Send + Sync>;
type Loss = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var> + Send + Sync>;

/// A named case assembled from closures.
pub struct Case {
    name: String,
    setup: Setup,
    loss: Loss,
}

impl GradCase for Case {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn setup(&self, seed: u64) -> ParamStore<f64> {
        (self.setup)(seed)
    }

    fn loss(&self, g: &mut Graph<f64>, params: &ParamStore<f64>, seed: u64) -> Result<Var> {
        (self.loss)(g, params, seed)
    }
}

fn case(
    name: impl Into<String>,
    setup: impl Fn(u64) -> ParamStore<f64> + Send + Sync + 'static,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>, u64) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        name: name.into(),
        setup: Box::new(setup),
        loss: Box::new(loss),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], a: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a))
}

/// Adds `U(-a, a)` noise to every registered tensor.
fn jitter(store: &mut ParamStore<f64>, seed: u64, a: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a17);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-a..a);
        }
    }
}

/// Scalar loss `Σ y ⊙ R` with a seeded random `R`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let shape = g.shape(y).to_vec();
    let r = uniform(&mut rng, &shape, 1.0);
    g.project(y, Arc::new(r))
}

fn input(store: &ParamStore<f64>, g: &mut Graph<f64>) -> Var {
    g.param(store, store.id("x").expect("case input"))
}

const C: usize = 4;

fn block_dims(window: usize) -> BlockDims {
    BlockDims {
        channels: C,
        window,
        heads: 2,
        ffn_ratio: 2,
    }
}

/// Shifted 4×4 windows over a 6×6 map: padded, with region masks.
fn attention_layout() -> AttentionLayout {
    AttentionLayout::from_windows(&WindowLayout::new(6, 6, 4, 2), 2, C)
}

fn upsampler_config(variant: Variant, reweight: Reweight) -> UpsamplerConfig {
    UpsamplerConfig {
        feat_channels: C,
        c_up: 6,
        phi_hidden: 5,
        reweight,
        variant,
    }
}

/// Every registered case.
pub fn registry() -> Vec<Case> {
    let mut cases = vec![
        case(
            "matmul",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("a", uniform(&mut rng, &[3, 4], 1.0));
                p.add("b", uniform(&mut rng, &[4, 5], 1.0));
                p
            },
            |g, p, s| {
                let a = g.param_by_name(p, "a")?;
                let b = g.param_by_name(p, "b")?;
                let y = g.matmul(a, b)?;
                project(g, y, s)
            },
        ),
        case(
            "linear",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[5, 3], 1.0));
                LinearIds::add(&mut p, &mut Initializer::new(s), "fc", 3, 4, LinearInit::FanInUniform);
                jitter(&mut p, s, 0.3);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = LinearIds::resolve(p, "fc")?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
        case(
            "conv2d 3x3",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[2, 5, 6], 1.0));
                ConvIds::add(&mut p, &mut Initializer::new(s), "conv", 2, 3, 3);
                jitter(&mut p, s, 0.3);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = ConvIds::resolve(p, "conv", false)?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
        case(
            "depthwise conv 5x5",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[3, 6, 4], 1.0));
                ConvIds::add_depthwise(&mut p, &mut Initializer::new(s), "dw", 3, 5);
                jitter(&mut p, s, 0.3);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = ConvIds::resolve(p, "dw", true)?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
        case(
            "layer norm",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[4, 6], 2.0));
                NormIds::add(&mut p, "ln", 6);
                jitter(&mut p, s, 0.3);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = NormIds::resolve(p, "ln")?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
        case(
            "softmax rows",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[3, 5], 2.0));
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = g.softmax_rows(x)?;
                project(g, y, s)
            },
        ),
        case(
            "l1 loss",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[4, 3], 1.0));
                p
            },
            |g, p, s| {
                let x = input(p, g);
                // Targets sit 0.5 from the unperturbed input, far from the kink.
                let xv = uniform(&mut ChaCha8Rng::seed_from_u64(s), &[4, 3], 1.0).into_data();
                let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x11);
                let t = Tensor::from_fn(&[4, 3], |i| xv[i] + if rng.random_bool(0.5) { 0.5 } else { -0.5 });
                g.l1_loss(x, Arc::new(t))
            },
        ),
        case(
            "window attention, shifted and masked",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                let att = attention_layout();
                let rows = att.n_windows * att.tokens();
                for n in ["q", "k", "v"] {
                    p.add(n, uniform(&mut rng, &[rows, C], 1.0));
                }
                p.add("table", uniform(&mut rng, &[att.table_rows(), att.heads], 0.5));
                p
            },
            |g, p, s| {
                let att = Arc::new(attention_layout());
                let [q, k, v, t] = ["q", "k", "v", "table"].map(|n| g.param_by_name(p, n));
                let y = g.window_attention(q?, k?, v?, t?, att)?;
                project(g, y, s)
            },
        ),
        case(
            "channel attention",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[7, 8], 1.0));
                ChannelAttention::add(&mut p, &mut Initializer::new(s), "ca", 8);
                jitter(&mut p, s, 0.5);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = ChannelAttention::resolve(p, "ca")?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
        case(
            "single-branch block",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[20, C], 1.0));
                SingleBranchBlock::add(&mut p, &mut Initializer::new(s), "sbb", block_dims(4));
                jitter(&mut p, s, 0.3);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let (y, _) = SingleBranchBlock::resolve(p, "sbb")?.forward(g, p, x, 4, 5)?;
                project(g, y, s)
            },
        ),
        case(
            "MLP renderer",
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[6, 4], 1.0));
                Mlp::add(&mut p, &mut Initializer::new(s), "phi", &[4, 5, 5, 5, 3], LinearInit::FanInUniform);
                jitter(&mut p, s, 0.2);
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let y = Mlp::resolve(p, "phi", 4)?.apply(g, p, x)?;
                project(g, y, s)
            },
        ),
    ];

    for f in [Activation::Sin, Activation::Tanh, Activation::Sigmoid, Activation::Relu] {
        cases.push(case(
            format!("activation {f:?}").to_lowercase(),
            |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                // Magnitudes in [0.1, 2] keep ReLU away from its kink.
                p.add(
                    "x",
                    Tensor::from_fn(&[3, 4], |_| {
                        let m = rng.random_range(0.1..2.0);
                        if rng.random_bool(0.5) {
                            m
                        } else {
                            -m
                        }
                    }),
                );
                p
            },
            move |g, p, s| {
                let x = input(p, g);
                let y = g.act(x, f);
                project(g, y, s)
            },
        ));
    }

    for reweight in Reweight::ALL {
        cases.push(case(
            format!("modulation {}", reweight.name()),
            move |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                for n in ["q", "k", "v"] {
                    p.add(n, uniform(&mut rng, &[5, 6], 1.5));
                }
                Upsampler::init(
                    &mut p,
                    &mut Initializer::new(s),
                    upsampler_config(Variant::Modulation, reweight),
                    "up",
                    LinearInit::FanInUniform,
                )
                .expect("valid config");
                jitter(&mut p, s, 0.3);
                p
            },
            move |g, p, s| {
                let up = Upsampler::resolve(p, upsampler_config(Variant::Modulation, reweight), "up")?;
                let [q, k, v] = ["q", "k", "v"].map(|n| g.param_by_name(p, n));
                let cell = CellSize {
                    s_h: 0.3,
                    s_w: 0.2,
                };
                let y = up.modulate_vars(g, p, q?, k?, v?, cell)?;
                project(g, y, s)
            },
        ));
    }

    for mode in BranchMode::ALL {
        cases.push(case(
            format!("dual-branch block {}", mode.name()),
            move |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[30, C], 1.0));
                DualBranchBlock::add(&mut p, &mut Initializer::new(s), "dbb", block_dims(4), 2, mode)
                    .expect("valid dims");
                jitter(&mut p, s, 0.3);
                p
            },
            move |g, p, s| {
                let x = input(p, g);
                let blk = DualBranchBlock::resolve(p, "dbb", block_dims(4), 2, mode)?;
                let (y, _, _) = blk.forward(g, p, x, 5, 6)?;
                project(g, y, s)
            },
        ));
    }

    for variant in Variant::ALL {
        cases.push(case(
            format!("upsampler {}", variant.name()),
            move |s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut rng, &[12, C], 1.0));
                Upsampler::init(
                    &mut p,
                    &mut Initializer::new(s),
                    upsampler_config(variant, Reweight::Sin),
                    "up",
                    LinearInit::FanInUniform,
                )
                .expect("valid config");
                jitter(&mut p, s, 0.2);
                p
            },
            move |g, p, s| {
                let up = Upsampler::resolve(p, upsampler_config(variant, Reweight::Sin), "up")?;
                let x = input(p, g);
                let queries: Vec<(usize, usize)> = (0..7).flat_map(|y| (0..9).map(move |x| (y, x))).step_by(4).collect();
                let y = up.forward_queries(g, p, x, 3, 4, 7, 9, &queries)?;
                project(g, y, s)
            },
        ));
    }

    let template = Arc::new({
        let mut m = Model::<f64>::new(ModelConfig::desk(), 0).expect("desk preset");
        m.params = ParamStore::new();
        m
    });
    let t2 = Arc::clone(&template);
    cases.push(case(
        "desk model end to end",
        |s| {
            let mut m = Model::<f64>::new(ModelConfig::desk(), s).expect("desk preset");
            jitter(&mut m.params, s, 0.05);
            m.params
        },
        move |g, p, s| {
            let mut model = (*t2).clone();
            model.params = p.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x1d);
            let lr = g.constant(Tensor::from_fn(&[3, 6, 5], |_| rng.random::<f64>()));
            let queries: Vec<(usize, usize)> = (0..13).flat_map(|y| (0..11).map(move |x| (y, x))).step_by(5).collect();
            let out = model.forward_queries(g, lr, 13, 11, &queries)?;
            project(g, out, s)
        },
    ));
    drop(template);

    cases
}

/// Runs every case over `seeds`.
pub fn run_all(seeds: &[u64]) -> Result<Vec<GradReport>> {
    registry()
        .iter()
        .map(|c| check_gradients(c, seeds.iter().copied()))
        .collect()
}

/// Aligned per-case table.
pub fn format_reports(reports: &[GradReport]) -> String {
    let mut out = format!(
        "{:<40} {:>13} {:>8}  {:<6} {}\n",
        "case", "max rel err", "checked", "status", "worst"
    );
    for r in reports {
        let worst = r.worst.as_ref().map_or(String::new(), |(n, i)| format!("{n}[{i}]"));
        out.push_str(&format!(
            "{:<40} {:>13.3e} {:>8}  {:<6} {}\n",
            r.name,
            r.max_rel_err,
            r.checked,
            if r.passes(GRAD_TOL) { "ok" } else { "FAIL" },
            worst
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detached_dependency_is_reported() {
        // y = x ⊙ stop_grad(x): the true gradient is 2x, the graph sees x.
        let c = case(
            "detached",
            |s| {
                let mut p = ParamStore::new();
                p.add("x", uniform(&mut ChaCha8Rng::seed_from_u64(s), &[3, 3], 1.0));
                p
            },
            |g, p, s| {
                let x = input(p, g);
                let d = g.constant(g.value(x).clone());
                let y = g.mul(x, d)?;
                project(g, y, s)
            },
        );
        let r = check_gradients(&c, [0]).unwrap();
        assert!(r.max_rel_err > 0.1, "{r:?}");
        assert!(!r.passes(GRAD_TOL));
    }

    #[test]
    fn every_registered_case_passes() {
        let reports = run_all(&[0, 1]).unwrap();
        let text = format_reports(&reports);
        for r in &reports {
            assert!(r.passes(GRAD_TOL), "{}\n{text}", r.name);
        }
        assert!(reports.len() >= 25, "{text}");
    }
}
