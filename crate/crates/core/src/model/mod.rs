//! The completion network: encoder, seed generator and three up-sampling
//! blocks, plus the multi-stage Chamfer objective.

mod decoder;
mod encoder;
mod loss;
mod seed;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use decoder::{merge_and_start, BlockParams, Deconv, MiniPointNet};
pub use encoder::{set_abstraction, Encoded, EncoderParams};
pub use loss::{completion_loss, LossBreakdown, LossTargets};
pub use seed::SeedGenerator;

use crate::crt::CrtConfig;
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::nn::{Bound, Builder, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Tape, Tensor};

/// Which cross-resolution transformers an up-sampling block runs, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CrtKind {
    Inter,
    Intra,
}

/// Up-sampling block arrangements; `G` is the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// No cross-resolution transformer.
    A,
    /// Intra-level only.
    B,
    /// Inter-level only.
    C,
    /// Two intra-level.
    D,
    /// Two inter-level.
    E,
    /// Intra-level, then inter-level.
    F,
    /// Inter-level, then intra-level.
    G,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::G,
    ];

    pub fn sequence(self) -> &'static [CrtKind] {
        use CrtKind::{Inter, Intra};
        match self {
            Variant::A => &[],
            Variant::B => &[Intra],
            Variant::C => &[Inter],
            Variant::D => &[Intra, Intra],
            Variant::E => &[Inter, Inter],
            Variant::F => &[Intra, Inter],
            Variant::G => &[Inter, Intra],
        }
    }

    pub fn uses_inter(self) -> bool {
        self.sequence().contains(&CrtKind::Inter)
    }

    pub fn uses_intra(self) -> bool {
        self.sequence().contains(&CrtKind::Intra)
    }

    pub fn letter(self) -> char {
        match self {
            Variant::A => 'A',
            Variant::B => 'B',
            Variant::C => 'C',
            Variant::D => 'D',
            Variant::E => 'E',
            Variant::F => 'F',
            Variant::G => 'G',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.letter() == c.to_ascii_uppercase())
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Partial input size the model is configured for.
    pub input_points: usize,
    /// Decoder feature width `D`.
    pub dim: usize,
    /// Shape-vector width `C`.
    pub shape_dim: usize,
    /// Centers kept by each set-abstraction layer; the last is `N_p`.
    pub sa_points: [usize; 3],
    /// Output width of each set-abstraction layer; the last is `C_p`.
    pub sa_dims: [usize; 3],
    pub sa_k: usize,
    /// Scales of the two encoder intra-level transformers.
    pub encoder_m: usize,
    pub encoder_k: usize,
    /// `N_sd`, a multiple of `N_p`.
    pub seed_points: usize,
    pub seed_k: usize,
    /// `N_0`.
    pub start_points: usize,
    /// `r_0, r_1, r_2`.
    pub up_ratios: [usize; 3],
    pub crt_k: usize,
    /// Pyramid down-sampling fraction per level.
    pub crt_ratio: f64,
    pub m_inter: usize,
    pub m_intra: usize,
    pub variant: Variant,
    /// Width of the learned per-child codes in deconvolution.
    pub child_code_dim: usize,
    /// Bound on per-child offsets (`tanh` times this).
    pub offset_scale: f64,
    /// Multiplier on the fan-in uniform bound used for weights.
    pub init_gain: f64,
    /// Wrap every transformer attention in a residual connection.
    pub attention_residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_points: 2048,
            dim: 128,
            shape_dim: 512,
            sa_points: [256, 192, 128],
            sa_dims: [64, 128, 256],
            sa_k: 16,
            encoder_m: 3,
            encoder_k: 16,
            seed_points: 256,
            seed_k: 16,
            start_points: 512,
            up_ratios: [1, 4, 8],
            crt_k: 16,
            crt_ratio: 0.5,
            m_inter: 3,
            m_intra: 3,
            variant: Variant::G,
            child_code_dim: 16,
            offset_scale: 0.5,
            init_gain: 1.0,
            attention_residual: false,
        }
    }
}

impl ModelConfig {
    /// The gradient-check configuration: 64 points in, 256 out, `D = 8`,
    /// `C = 16`, two scales, `k = 4`, ratios `(1, 2, 2)`.
    pub fn tiny() -> Self {
        Self {
            input_points: 64,
            dim: 8,
            shape_dim: 16,
            sa_points: [32, 16, 8],
            sa_dims: [8, 8, 8],
            sa_k: 4,
            encoder_m: 2,
            encoder_k: 4,
            seed_points: 16,
            seed_k: 4,
            start_points: 64,
            up_ratios: [1, 2, 2],
            crt_k: 4,
            crt_ratio: 0.5,
            m_inter: 2,
            m_intra: 2,
            variant: Variant::G,
            child_code_dim: 4,
            offset_scale: 0.5,
            init_gain: 1.0,
            attention_residual: false,
        }
    }

    /// Desk-scale training configuration: 512 points in, 2048 out, `D = 32`,
    /// two scales.
    pub fn toy() -> Self {
        Self {
            input_points: 512,
            dim: 32,
            shape_dim: 64,
            sa_points: [128, 96, 64],
            sa_dims: [32, 32, 64],
            sa_k: 16,
            encoder_m: 2,
            encoder_k: 8,
            seed_points: 128,
            seed_k: 8,
            start_points: 128,
            up_ratios: [1, 4, 4],
            crt_k: 8,
            crt_ratio: 0.5,
            m_inter: 2,
            m_intra: 2,
            variant: Variant::G,
            child_code_dim: 8,
            offset_scale: 0.5,
            init_gain: 1.0,
            attention_residual: false,
        }
    }

    pub fn partial_points(&self) -> usize {
        self.sa_points[2]
    }

    pub fn partial_dim(&self) -> usize {
        self.sa_dims[2]
    }

    /// `N_0, N_1, N_2, N_3`.
    pub fn stage_sizes(&self) -> [usize; 4] {
        let n0 = self.start_points;
        let n1 = n0 * self.up_ratios[0];
        let n2 = n1 * self.up_ratios[1];
        [n0, n1, n2, n2 * self.up_ratios[2]]
    }

    /// Smallest partial input the encoder accepts.
    pub fn min_input_points(&self) -> usize {
        self.sa_points[0]
    }

    pub fn encoder_crt(&self, layer: usize) -> CrtConfig {
        self.crt(self.encoder_m, self.encoder_k, self.sa_dims[layer])
    }

    pub fn block_crt(&self, kind: CrtKind) -> CrtConfig {
        let m = match kind {
            CrtKind::Inter => self.m_inter,
            CrtKind::Intra => self.m_intra,
        };
        self.crt(m, self.crt_k, self.dim)
    }

    fn crt(&self, m: usize, k: usize, dim: usize) -> CrtConfig {
        CrtConfig {
            m,
            k,
            ratios: vec![self.crt_ratio; m.saturating_sub(1)],
            dim,
            residual: self.attention_residual,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_points", self.input_points),
            ("dim", self.dim),
            ("shape_dim", self.shape_dim),
            ("sa_k", self.sa_k),
            ("encoder_k", self.encoder_k),
            ("seed_points", self.seed_points),
            ("seed_k", self.seed_k),
            ("start_points", self.start_points),
            ("crt_k", self.crt_k),
            ("child_code_dim", self.child_code_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("config: {name} must be positive")));
        }
        if self.sa_points.contains(&0) || self.sa_dims.contains(&0) || self.up_ratios.contains(&0) {
            return Err(Error::contract(
                "config: sa_points, sa_dims and up_ratios must be positive",
            ));
        }
        if self.sa_points.windows(2).any(|w| w[1] > w[0]) || self.sa_points[0] > self.input_points {
            return Err(Error::contract(format!(
                "config: set-abstraction sizes {:?} must be non-increasing and at most input_points = {}",
                self.sa_points, self.input_points
            )));
        }
        if self.seed_points % self.partial_points() != 0 {
            return Err(Error::contract(format!(
                "config: seed_points = {} is not a multiple of N_p = {}",
                self.seed_points,
                self.partial_points()
            )));
        }
        if self.start_points > self.input_points + self.seed_points {
            return Err(Error::contract(format!(
                "config: start_points = {} exceeds input + seeds = {}",
                self.start_points,
                self.input_points + self.seed_points
            )));
        }
        if !(self.offset_scale > 0.0) || !(self.init_gain > 0.0) {
            return Err(Error::contract(
                "config: offset_scale and init_gain must be positive",
            ));
        }
        if self.encoder_m == 0 || self.m_inter == 0 || self.m_intra == 0 {
            return Err(Error::contract("config: every transformer needs m >= 1"));
        }
        // Every pyramid must be constructible at its stage size.
        for layer in 0..2 {
            self.encoder_crt(layer).level_sizes(self.sa_points[layer])?;
        }
        let stages = self.stage_sizes();
        for kind in [CrtKind::Inter, CrtKind::Intra] {
            let crt = self.block_crt(kind);
            crt.level_sizes(self.seed_points)?;
            for &n in &stages[..3] {
                crt.level_sizes(n)?;
            }
        }
        Ok(())
    }
}

/// Structure of a model's parameters.
#[derive(Clone, Debug)]
pub struct Layout {
    pub encoder: EncoderParams,
    pub seed: SeedGenerator,
    pub blocks: Vec<BlockParams>,
}

/// Every intermediate point set of one forward pass.
#[derive(Clone, Debug)]
pub struct CompletionOutput<T> {
    pub shape_vector: Tensor<T>,
    pub partial_coords: Tensor<T>,
    pub partial_feats: Tensor<T>,
    pub seeds: Tensor<T>,
    pub seed_feats: Tensor<T>,
    pub start: Tensor<T>,
    /// `P_1, P_2, P_3`.
    pub stages: Vec<Tensor<T>>,
    /// `F_0, F_1, F_2`, aligned with `P_0, P_1, P_2`.
    pub stage_feats: Vec<Tensor<T>>,
}

impl<T: Real> CompletionOutput<T> {
    pub fn completion(&self) -> &Tensor<T> {
        self.stages.last().expect("three stages")
    }

    /// The point sets supervised by the loss: seeds, `P_1`, `P_2`, `P_3`.
    pub fn supervised(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.seeds).chain(&self.stages).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    /// Builds a freshly initialized model; weights are drawn from a ChaCha8
    /// stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
            gain: config.init_gain,
        };
        let encoder = EncoderParams::new(&mut b, &config);
        let seed = SeedGenerator::new(&mut b, &config);
        let blocks = (0..3)
            .map(|i| BlockParams::new(&mut b, &config, i))
            .collect();
        Ok(Self {
            config,
            params: store,
            layout: Layout {
                encoder,
                seed,
                blocks,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Full forward pass with parameters already bound to `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<T>,
        partial: &[Point<T>],
    ) -> Result<CompletionOutput<T>> {
        let cfg = &self.config;
        let partial_t = Tensor::from_points(partial);
        let enc = self.layout.encoder.encode(tape, p, cfg, &partial_t)?;
        let (seeds, seed_feats) =
            self.layout
                .seed
                .generate(tape, p, cfg, &enc.coords, &enc.feats, &enc.shape_vector)?;
        let start = merge_and_start(tape, &partial_t, &seeds, cfg.start_points)?;

        let mut stages = Vec::with_capacity(3);
        let mut stage_feats = Vec::with_capacity(3);
        let mut current = start.clone();
        let mut support = (seeds.clone(), seed_feats.clone());
        for block in &self.layout.blocks {
            let (next, feats) = block.forward(
                tape,
                p,
                cfg,
                &current,
                (&support.0, &support.1),
                &enc.shape_vector,
            )?;
            support = (current, feats.clone());
            stage_feats.push(feats);
            stages.push(next.clone());
            current = next;
        }
        Ok(CompletionOutput {
            shape_vector: enc.shape_vector,
            partial_coords: enc.coords,
            partial_feats: enc.feats,
            seeds,
            seed_feats,
            start,
            stages,
            stage_feats,
        })
    }

    /// Forward pass without recording gradients.
    pub fn infer(&self, partial: &[Point<T>]) -> Result<CompletionOutput<T>> {
        let mut tape = Tape::inference();
        let p = self.params.bind(&mut tape);
        self.forward(&mut tape, &p, partial)
    }
}
