//! Finite-difference gradient suites over every differentiable primitive and
//! composed block, runnable from the command line and the acceptance run.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detection::{assign_targets, detection_loss, Annotation, BBox, DetOutputs, HeadConfig, LevelGeometry, LevelOutputs};
use crate::error::{Error, Result};
use crate::focal::{
    fsm_forward, lrsm_forward, ssmb_forward, FsmConfig, FsmParams, LowRankMemory, LrsmConfig, SsmbConfig, SsmbParams,
};
use crate::gradcheck::{check, GradCheckOptions, GradCheckReport};
use crate::network::{FunConfig, FunModel};
use crate::nn::Init;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Primitives whose outputs mix many inputs (normalizations, pooling).
pub const REDUCTION_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Primitives,
    Fsm,
    Lrsm,
    Ssmb,
    Network,
    Charbonnier,
    Detection,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::Primitives,
        Suite::Fsm,
        Suite::Lrsm,
        Suite::Ssmb,
        Suite::Network,
        Suite::Charbonnier,
        Suite::Detection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Primitives => "primitives",
            Suite::Fsm => "fsm",
            Suite::Lrsm => "lrsm",
            Suite::Ssmb => "ssmb",
            Suite::Network => "network",
            Suite::Charbonnier => "charbonnier",
            Suite::Detection => "detection",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Suite> {
        Suite::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient suite {s:?}")))
    }
}

/// One finite-difference comparison and the tolerance it must meet.
#[derive(Clone, Debug)]
pub struct SuiteCheck {
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

impl fmt::Display for SuiteCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {:>4} points  max rel err {:.3e}  tol {:.0e}  {}",
            self.report.name,
            self.report.points,
            self.report.max_rel_err,
            self.tolerance,
            if self.passes() { "ok" } else { "FAIL" }
        )
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn t(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.0.gen_range(lo..hi))
    }
}

type Closure = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<SuiteCheck>> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let prim = GradCheckOptions { floor: 1e-6, seed, ..GradCheckOptions::default() };
    let composed = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: &[Tensor<f64>], opts: GradCheckOptions, tol: f64, f: Closure| -> Result<()> {
        let checked: Vec<usize> = (0..inputs.len()).collect();
        let report = check(name, inputs, &checked, opts, f)?;
        out.push(SuiteCheck { report, tolerance: tol });
        Ok(())
    };
    match suite {
        Suite::Primitives => {
            let a = g.t(&[2, 3, 4], -1.0, 1.0);
            let b = g.t(&[2, 3, 4], -1.0, 1.0);
            let row = g.t(&[4], -1.0, 1.0);
            let x3 = g.t(&[3, 4], -3.0, 3.0);
            push("add", &[a.clone(), row.clone()], prim, PRIMITIVE_TOL, Box::new(|t, v| t.add(v[0], v[1])))?;
            push("sub", &[a.clone(), b.clone()], prim, PRIMITIVE_TOL, Box::new(|t, v| t.sub(v[0], v[1])))?;
            push("mul", &[a.clone(), b.clone()], prim, PRIMITIVE_TOL, Box::new(|t, v| t.mul(v[0], v[1])))?;
            push("scale", std::slice::from_ref(&x3), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.scale(v[0], -1.7))))?;
            push("add_scalar", std::slice::from_ref(&x3), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3))))?;
            push("exp", std::slice::from_ref(&x3), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.exp(v[0]))))?;
            push("gelu", std::slice::from_ref(&x3), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.gelu(v[0]))))?;
            push("sigmoid", std::slice::from_ref(&x3), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.sigmoid(v[0]))))?;
            push("sum", std::slice::from_ref(&a), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.sum(v[0]))))?;
            push("mean", std::slice::from_ref(&a), prim, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.mean(v[0]))))?;
            push("reshape", std::slice::from_ref(&a), prim, PRIMITIVE_TOL, Box::new(|t, v| t.reshape(v[0], &[6, 4])))?;
            push("transpose", std::slice::from_ref(&a), prim, PRIMITIVE_TOL, Box::new(|t, v| t.transpose_last2(v[0])))?;
            let c = g.t(&[2, 2, 4], -1.0, 1.0);
            push("concat", &[a.clone(), c], prim, PRIMITIVE_TOL, Box::new(|t, v| t.concat(&[v[0], v[1]], 1)))?;
            push("slice_last", std::slice::from_ref(&a), prim, PRIMITIVE_TOL, Box::new(|t, v| t.slice_last(v[0], 1, 2)))?;
            let rows = g.t(&[6, 4], -1.0, 1.0);
            let all = GradCheckOptions { points: 24, ..prim };
            push("gather_rows", &[rows], all, PRIMITIVE_TOL, Box::new(|t, v| t.gather_rows(v[0], &[4, 0, 4, 5])))?;
            let m = g.t(&[2, 4, 5], -1.0, 1.0);
            push("matmul", &[a.clone(), m], prim, PRIMITIVE_TOL, Box::new(|t, v| t.matmul(v[0], v[1])))?;
            let (w, bias) = (g.t(&[4, 3], -1.0, 1.0), g.t(&[3], -1.0, 1.0));
            push("linear", &[a.clone(), w, bias], prim, PRIMITIVE_TOL, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2]))))?;
            let img = g.t(&[1, 6, 5, 2], -1.0, 1.0);
            let (k, kb) = (g.t(&[3, 3, 2, 3], -1.0, 1.0), g.t(&[3], -1.0, 1.0));
            for (stride, pad) in [(1, 1), (2, 0)] {
                push(
                    &format!("conv2d s{stride} p{pad}"),
                    &[img.clone(), k.clone(), kb.clone()],
                    prim,
                    PRIMITIVE_TOL,
                    Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                )?;
            }
            let small = g.t(&[1, 3, 3, 3], -1.0, 1.0);
            let (dk, db) = (g.t(&[2, 2, 2, 3], -1.0, 1.0), g.t(&[2], -1.0, 1.0));
            push(
                "conv_transpose2d",
                &[small, dk, db],
                prim,
                PRIMITIVE_TOL,
                Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 0)),
            )?;
            let (wk, wb) = (g.t(&[5, 5, 2], -1.0, 1.0), g.t(&[2], -1.0, 1.0));
            push("depthwise_conv2d", &[img.clone(), wk, wb], prim, PRIMITIVE_TOL, Box::new(|t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]))))?;
            let x4 = g.t(&[2, 3, 4, 5], -1.0, 1.0);
            push("softmax", std::slice::from_ref(&x4), prim, REDUCTION_TOL, Box::new(|t, v| t.softmax(v[0], 3)))?;
            let (gamma, beta) = (g.t(&[5], -1.0, 1.0), g.t(&[5], -1.0, 1.0));
            push(
                "layer_norm",
                &[x4.clone(), gamma, beta],
                prim,
                REDUCTION_TOL,
                Box::new(|t, v| t.layer_norm(v[0], Some(v[1]), Some(v[2]), 1e-5)),
            )?;
            push("global_avg_pool", &[x4], prim, REDUCTION_TOL, Box::new(|t, v| t.global_avg_pool(v[0])))?;
            let (q, bank) = (g.t(&[3, 4], -1.0, 1.0), g.t(&[4, 6], -1.0, 1.0));
            push("memory_read", &[q, bank], all, PRIMITIVE_TOL, Box::new(|t, v| Ok(t.memory_read(v[0], v[1])?.0)))?;
            let logits = g.t(&[6, 3], -2.0, 2.0);
            let mut hot = Tensor::zeros(&[6, 3]);
            hot.data_mut()[1] = 1.0;
            hot.data_mut()[9] = 1.0;
            push(
                "focal_loss",
                std::slice::from_ref(&logits),
                prim,
                PRIMITIVE_TOL,
                Box::new(move |t, v| t.sigmoid_focal_loss(v[0], &hot, 0.25, 2.0, 2.0)),
            )?;
            let soft = g.t(&[6, 3], 0.0, 1.0);
            push("bce_with_logits", &[logits], prim, PRIMITIVE_TOL, Box::new(move |t, v| t.bce_with_logits(v[0], &soft, 6.0)))?;
            let (pred, target) = (g.t(&[5, 4], 1.0, 3.0), g.t(&[5, 4], 1.0, 3.0));
            push("iou_loss", &[pred], prim, PRIMITIVE_TOL, Box::new(move |t, v| t.iou_loss(v[0], &target, 5.0)))?;
        }
        Suite::Charbonnier => {
            let (a, b) = (g.t(&[3, 3, 2], 0.0, 1.0), g.t(&[3, 3, 2], 0.0, 1.0));
            let opts = GradCheckOptions { points: 18, ..prim };
            push("charbonnier", &[a, b], opts, PRIMITIVE_TOL, Box::new(|t, v| t.charbonnier(v[0], v[1], 1e-3)))?;
        }
        Suite::Fsm | Suite::Lrsm | Suite::Ssmb => {
            let mut store = ParamStore::<f64>::new();
            let mut init = Init::new(&mut store, seed);
            let (name, x, f): (&str, Tensor<f64>, Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>) = match suite {
                Suite::Fsm => {
                    let p = FsmParams::init(&mut init, "fsm", &FsmConfig { kernels: vec![3, 5] }, 4)?;
                    ("fsm", g.t(&[1, 6, 6, 4], -1.0, 1.0), Box::new(move |t, x| fsm_forward(t, x, &p)))
                }
                Suite::Lrsm => {
                    let m = LowRankMemory::init(&mut init, "lrsm", &LrsmConfig { rank: Some(4), bank: 5 }, 6)?;
                    ("lrsm", g.t(&[2, 3, 3, 6], -1.0, 1.0), Box::new(move |t, x| lrsm_forward(t, x, &m)))
                }
                _ => {
                    let cfg = SsmbConfig {
                        lrsm: LrsmConfig { rank: Some(2), bank: 4 },
                        ..SsmbConfig::default()
                    };
                    let p = SsmbParams::init(&mut init, "ssmb", &cfg, 4)?;
                    ("ssmb", g.t(&[1, 5, 5, 4], -1.0, 1.0), Box::new(move |t, x| ssmb_forward(t, x, &p)))
                }
            };
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(x);
            let opts = GradCheckOptions { points: 8, ..composed };
            push(name, &inputs, opts, COMPOSED_TOL, Box::new(move |t, _| f(t, t.leaf_var(n))))?;
        }
        Suite::Network => {
            let cfg = FunConfig {
                base_channels: 4,
                depths: [1; 6],
                bands: 4,
                num_classes: 2,
                block: SsmbConfig {
                    lrsm: LrsmConfig { rank: Some(2), bank: 4 },
                    ffn_expansion: 2,
                    ..SsmbConfig::default()
                },
                head: HeadConfig { width: 4, ..HeadConfig::default() },
                ..FunConfig::default()
            };
            let (model, store) = FunModel::build::<f64>(&cfg, seed)?;
            let n = store.len();
            let mut inputs = store.values().to_vec();
            inputs.push(g.t(&[1, 16, 16, 4], 0.0, 1.0));
            let target = g.t(&[1, 16, 16, 4], 0.0, 1.0);
            let anns = vec![vec![
                Annotation { class_id: 1, bbox: BBox::new(2.0, 3.0, 7.0, 8.0) },
                Annotation { class_id: 0, bbox: BBox::new(4.0, 1.0, 15.0, 14.0) },
            ]];
            let opts = GradCheckOptions { points: 2, ..composed };
            push(
                "fun (joint loss)",
                &inputs,
                opts,
                COMPOSED_TOL,
                Box::new(move |tape, _| {
                    let x = tape.leaf_var(n);
                    let (out, det) = model.forward_with_head(tape, x)?;
                    let t = tape.constant(target.clone());
                    let rec = tape.charbonnier(out.reconstruction, t, 1e-3)?;
                    let targets = assign_targets(&anns, &det.geometry, cfg.num_classes);
                    let l = detection_loss(tape, &det, &targets, &cfg.head)?;
                    let a = tape.add(l.cls, l.reg)?;
                    let b = tape.add(a, l.ctr)?;
                    let rec5 = tape.scale(rec, 5.0);
                    tape.add(rec5, b)
                }),
            )?;
        }
        Suite::Detection => {
            let head = HeadConfig::default();
            let geom: Vec<LevelGeometry> = [8usize, 4, 2]
                .iter()
                .zip(&head.scale_ranges)
                .map(|(&stride, &range)| LevelGeometry { height: 16 / stride, width: 16 / stride, stride, range })
                .collect();
            let mut inputs = Vec::new();
            for lv in &geom {
                let (h, w) = (lv.height, lv.width);
                inputs.push(g.t(&[1, h, w, 2], -2.0, 2.0));
                inputs.push(g.t(&[1, h, w, 4], 0.5, 6.0));
                inputs.push(g.t(&[1, h, w, 1], -2.0, 2.0));
            }
            let anns = vec![vec![
                Annotation { class_id: 0, bbox: BBox::new(1.0, 2.0, 6.0, 7.0) },
                Annotation { class_id: 1, bbox: BBox::new(6.0, 6.0, 16.0, 16.0) },
            ]];
            let targets = assign_targets(&anns, &geom, 2);
            let opts = GradCheckOptions { points: 30, ..prim };
            push(
                "detection_loss",
                &inputs,
                opts,
                PRIMITIVE_TOL,
                Box::new(move |tape, v| {
                    let levels = v.chunks(3).map(|c| LevelOutputs { cls: c[0], reg: c[1], ctr: c[2] }).collect();
                    let out = DetOutputs { levels, geometry: geom.clone(), batch: 1 };
                    let l = detection_loss(tape, &out, &targets, &head)?;
                    let a = tape.add(l.cls, l.reg)?;
                    tape.add(a, l.ctr)
                }),
            )?;
        }
    }
    Ok(out)
}
