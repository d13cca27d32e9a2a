//! The six-stage U-shaped reconstruction network. Three encoder stages each
//! end in a stride-2 downsampling, stage four is the bottleneck, and stages
//! five and six follow stride-2 upsamplings fused with encoder skips. A final
//! upsampling and 3x3 projection emit the residual `R`; the reconstruction is
//! `H + R`. Stages four to six also feed the detection head.

use serde::{Deserialize, Serialize};

use crate::cassi::{shift_back, CodedAperture, DispersionSpec, HsiCube, Measurement};
use crate::detection::{head_forward, DetOutputs, DetectionHead, HeadConfig};
use crate::error::{Error, Result};
use crate::focal::{ssmb_forward, SsmbConfig, SsmbParams};
use crate::nn::{Conv, Init, Linear};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

pub const STAGES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSchedule {
    /// `(C, 2C, 4C, 8C, 4C, 2C)`
    Doubling,
    /// `(C, 2C, 4C, 4C, 4C, 2C)`
    Capped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FunConfig {
    pub base_channels: usize,
    pub depths: [usize; STAGES],
    pub bands: usize,
    pub num_classes: usize,
    pub schedule: ChannelSchedule,
    /// Block settings shared by every stage unless `stage_blocks` is given.
    pub block: SsmbConfig,
    pub stage_blocks: Option<Vec<SsmbConfig>>,
    pub head: HeadConfig,
}

impl Default for FunConfig {
    fn default() -> Self {
        FunConfig {
            base_channels: 16,
            depths: [1, 1, 1, 2, 1, 1],
            bands: 8,
            num_classes: 5,
            schedule: ChannelSchedule::Doubling,
            block: SsmbConfig::default(),
            stage_blocks: None,
            head: HeadConfig::default(),
        }
    }
}

impl FunConfig {
    pub fn channels(&self) -> [usize; STAGES] {
        let c = self.base_channels;
        match self.schedule {
            ChannelSchedule::Doubling => [c, 2 * c, 4 * c, 8 * c, 4 * c, 2 * c],
            ChannelSchedule::Capped => [c, 2 * c, 4 * c, 4 * c, 4 * c, 2 * c],
        }
    }

    pub fn stage_block(&self, stage: usize) -> &SsmbConfig {
        self.stage_blocks.as_ref().map_or(&self.block, |b| &b[stage])
    }

    /// Strides of the pyramid levels (stages four, five, six).
    pub fn pyramid_strides(&self) -> [usize; 3] {
        [8, 4, 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.bands == 0 || self.num_classes == 0 {
            return Err(Error::Config("channels, bands and classes must be positive".into()));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if let Some(b) = &self.stage_blocks {
            if b.len() != STAGES {
                return Err(Error::Config(format!("{} stage block configs for {STAGES} stages", b.len())));
            }
        }
        self.head.validate(3)
    }
}

/// Parameter handles of the whole model; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct FunModel {
    pub config: FunConfig,
    pub embed: Conv,
    pub stages: Vec<Vec<SsmbParams>>,
    /// 2x2 stride-2 convolutions after stages one to three.
    pub down: Vec<Conv>,
    /// 2x2 stride-2 transposed convolutions before stages five, six and the output.
    pub up: Vec<Conv>,
    /// 1x1 projections of `[upsampled, skip]` back to the stage width.
    pub fuse: Vec<Linear>,
    pub out: Conv,
    pub head: DetectionHead,
}

pub struct FunOutputs {
    pub residual: Var,
    pub reconstruction: Var,
    /// Stage four, five and six features with their strides.
    pub pyramid: Vec<(Var, usize)>,
}

impl FunModel {
    /// Deterministic initialization: the same config and seed give the same
    /// parameter names, order and values.
    pub fn build<T: Scalar>(config: &FunConfig, seed: u64) -> Result<(FunModel, ParamStore<T>)> {
        config.validate()?;
        let ch = config.channels();
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let embed = init.conv("embed", 3, config.bands, ch[0])?;
        let mut stages = Vec::new();
        for (s, &c) in ch.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..config.depths[s] {
                blocks.push(SsmbParams::init(&mut init, &format!("stage{}.{b}", s + 1), config.stage_block(s), c)?);
            }
            stages.push(blocks);
        }
        let mut down = Vec::new();
        for s in 0..3 {
            down.push(init.conv(&format!("down{}", s + 1), 2, ch[s], ch[s + 1])?);
        }
        // (source width, target width, skip width) for each upsampling
        let ups = [(ch[3], ch[4], ch[2]), (ch[4], ch[5], ch[1]), (ch[5], ch[0], ch[0])];
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        for (i, &(src, dst, skip)) in ups.iter().enumerate() {
            up.push(init.deconv(&format!("up{}", i + 1), 2, src, dst)?);
            fuse.push(init.linear(&format!("fuse{}", i + 1), dst + skip, dst)?);
        }
        let out = init.conv("out", 3, ch[0], config.bands)?;
        let head = DetectionHead::init(&mut init, "head", &config.head, &[ch[3], ch[4], ch[5]], config.num_classes)?;
        let model = FunModel {
            config: config.clone(),
            embed,
            stages,
            down,
            up,
            fuse,
            out,
            head,
        };
        Ok((model, store))
    }

    fn run_stage<T: Scalar>(&self, tape: &mut Tape<T>, stage: usize, mut x: Var) -> Result<Var> {
        for block in &self.stages[stage] {
            x = ssmb_forward(tape, x, block)?;
        }
        Ok(x)
    }

    fn up_fuse<T: Scalar>(&self, tape: &mut Tape<T>, i: usize, x: Var, skip: Var) -> Result<Var> {
        let u = self.up[i].forward_transposed(tape, x, 2, 0)?;
        let cat = tape.concat(&[u, skip], 3)?;
        self.fuse[i].forward(tape, cat)
    }

    /// Forward pass on shift-back inputs `[N, H, W, bands]`; `H` and `W` must
    /// be multiples of 8.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<FunOutputs> {
        let s = tape.shape(input).to_vec();
        if s.len() != 4 || s[3] != self.config.bands {
            return Err(Error::shape(
                "fun_forward",
                format!("expected [N, H, W, {}], got {s:?}", self.config.bands),
            ));
        }
        if !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) || s[1] == 0 || s[2] == 0 {
            return Err(Error::Contract(format!(
                "spatial size {}x{} is not a positive multiple of 8",
                s[1], s[2]
            )));
        }
        let x0 = self.embed.forward(tape, input, 1, 1)?;
        let e1 = self.run_stage(tape, 0, x0)?;
        let d1 = self.down[0].forward(tape, e1, 2, 0)?;
        let e2 = self.run_stage(tape, 1, d1)?;
        let d2 = self.down[1].forward(tape, e2, 2, 0)?;
        let e3 = self.run_stage(tape, 2, d2)?;
        let d3 = self.down[2].forward(tape, e3, 2, 0)?;
        let p4 = self.run_stage(tape, 3, d3)?;
        let u5 = self.up_fuse(tape, 0, p4, e3)?;
        let p5 = self.run_stage(tape, 4, u5)?;
        let u6 = self.up_fuse(tape, 1, p5, e2)?;
        let p6 = self.run_stage(tape, 5, u6)?;
        let top = self.up_fuse(tape, 2, p6, e1)?;
        let residual = self.out.forward(tape, top, 1, 1)?;
        let reconstruction = tape.add(input, residual)?;
        let strides = self.config.pyramid_strides();
        Ok(FunOutputs {
            residual,
            reconstruction,
            pyramid: vec![(p4, strides[0]), (p5, strides[1]), (p6, strides[2])],
        })
    }

    /// Forward pass followed by the detection head.
    pub fn forward_with_head<T: Scalar>(&self, tape: &mut Tape<T>, input: Var) -> Result<(FunOutputs, DetOutputs)> {
        let out = self.forward(tape, input)?;
        let det = head_forward(tape, &self.head, &self.config.head, &out.pyramid)?;
        Ok((out, det))
    }

    /// Shift back a measurement and return the network's reconstruction.
    pub fn reconstruct<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        y: &Measurement<T>,
        mask: &CodedAperture<T>,
        d: DispersionSpec,
    ) -> Result<HsiCube<T>> {
        let h = shift_back(y, d, self.config.bands)?;
        if mask.height() != h.height() || mask.width() != h.width() {
            return Err(Error::mismatch(
                "reconstruct",
                &[mask.height(), mask.width()],
                &[h.height(), h.width()],
            ));
        }
        let mut tape = Tape::with_params(store);
        let input = tape.constant(h.to_tensor().reshape(&[1, h.height(), h.width(), h.bands()])?);
        let out = self.forward(&mut tape, input)?;
        let t = tape.value(out.reconstruction).clone();
        HsiCube::from_tensor(&t.reshape(&[h.height(), h.width(), h.bands()])?)
    }
}

#[cfg(test)]
#[path = "network_tests.rs"]
mod tests;
