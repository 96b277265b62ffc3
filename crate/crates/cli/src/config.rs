//! Run configuration: a single TOML file describing the pipeline shape,
//! module placement, cost model, footprints, and transport semantics.
//! Unknown keys are rejected.

use serde::Deserialize;

use nestpipe_core::sim::DurationSpec;
use nestpipe_core::{
    ActivationFootprint, CommSemantics, CostModel, Error, FsdpMode, ModulePlacement, PayloadBytes,
    PipelineConfig, Result, Strategy,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub modules: ModulesSection,
    pub cost: CostSection,
    #[serde(default)]
    pub payload_bytes: PayloadSection,
    #[serde(default)]
    pub footprint: FootprintSection,
    #[serde(default)]
    pub comm: CommSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    /// Base seed for seeded duration distributions without an explicit seed.
    #[serde(default)]
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            strategies: default_strategies(),
            seed: 0,
        }
    }
}

fn default_strategies() -> Vec<String> {
    vec![
        "bigmac".to_string(),
        "compute_efficient".to_string(),
        "memory_efficient".to_string(),
    ]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub ranks: usize,
    pub microbatches: usize,
    #[serde(default = "one")]
    pub virtual_chunks: usize,
    #[serde(default = "three")]
    pub warmup_units: usize,
    #[serde(default = "one")]
    pub llm_cp: usize,
    #[serde(default = "one")]
    pub enc_cp: usize,
}

fn one() -> usize {
    1
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulesSection {
    #[serde(default = "default_true")]
    pub generator: bool,
    /// Defaults to the pipeline size.
    pub encoder_dp: Option<usize>,
    pub generator_dp: Option<usize>,
}

impl Default for ModulesSection {
    fn default() -> Self {
        ModulesSection {
            generator: true,
            encoder_dp: None,
            generator_dp: None,
        }
    }
}

fn default_true() -> bool {
    true
}

/// One operator-kind duration: a constant, an explicit per-microbatch vector,
/// or a seeded distribution.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Duration {
    Constant(f64),
    Spec(DurationTable),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DurationTable {
    pub per_microbatch: Option<Vec<f64>>,
    pub uniform: Option<RangeSpec>,
    pub bimodal: Option<BimodalSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeSpec {
    pub low: f64,
    pub high: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BimodalSpec {
    pub low: f64,
    pub high: f64,
    pub high_prob: f64,
    pub seed: Option<u64>,
    /// Share one draw across each scheduling unit.
    #[serde(default)]
    pub per_unit: bool,
}

impl Duration {
    fn resolve(&self, base_seed: u64, index: u64, unit_size: usize) -> Result<DurationSpec> {
        match self {
            Duration::Constant(v) => Ok(DurationSpec::Constant(*v)),
            Duration::Spec(table) => {
                let picked = usize::from(table.per_microbatch.is_some())
                    + usize::from(table.uniform.is_some())
                    + usize::from(table.bimodal.is_some());
                if picked != 1 {
                    return Err(Error::Config(
                        "duration table must set exactly one of per_microbatch | uniform | bimodal"
                            .into(),
                    ));
                }
                if let Some(v) = &table.per_microbatch {
                    return Ok(DurationSpec::PerMicrobatch(v.clone()));
                }
                if let Some(r) = &table.uniform {
                    return Ok(DurationSpec::Uniform {
                        low: r.low,
                        high: r.high,
                        seed: r.seed.unwrap_or(base_seed.wrapping_add(index)),
                    });
                }
                let b = table.bimodal.as_ref().unwrap();
                let seed = b.seed.unwrap_or(base_seed.wrapping_add(index));
                Ok(if b.per_unit {
                    DurationSpec::BimodalPerUnit {
                        low: b.low,
                        high: b.high,
                        high_prob: b.high_prob,
                        seed,
                        unit_size,
                    }
                } else {
                    DurationSpec::Bimodal {
                        low: b.low,
                        high: b.high,
                        high_prob: b.high_prob,
                        seed,
                    }
                })
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub llm_fwd: Duration,
    pub llm_bwd: Option<Duration>,
    pub enc_fwd: Duration,
    pub enc_bwd: Option<Duration>,
    #[serde(default = "zero_duration")]
    pub gen_fwd: Duration,
    pub gen_bwd: Option<Duration>,
    pub stage_scale: Option<Vec<f64>>,
    #[serde(default)]
    pub comm_latency: f64,
    #[serde(default)]
    pub bandwidth: f64,
    #[serde(default)]
    pub cp_convert: f64,
    #[serde(default)]
    pub fsdp_mode: FsdpModeName,
    #[serde(default)]
    pub fsdp_pull: f64,
    #[serde(default)]
    pub fsdp_gather: f64,
}

fn zero_duration() -> Duration {
    Duration::Constant(0.0)
}

#[derive(Debug, Clone, Copy, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FsdpModeName {
    #[default]
    None,
    Collective,
    OneSided,
}

impl From<FsdpModeName> for FsdpMode {
    fn from(name: FsdpModeName) -> Self {
        match name {
            FsdpModeName::None => FsdpMode::None,
            FsdpModeName::Collective => FsdpMode::Collective,
            FsdpModeName::OneSided => FsdpMode::OneSided,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadSection {
    #[serde(default = "one_u64")]
    pub activation: u64,
    #[serde(default = "one_u64")]
    pub gradient: u64,
    #[serde(default = "one_u64")]
    pub modality_embedding: u64,
    #[serde(default = "one_u64")]
    pub generator_input: u64,
}

fn one_u64() -> u64 {
    1
}

impl Default for PayloadSection {
    fn default() -> Self {
        PayloadSection {
            activation: 1,
            gradient: 1,
            modality_embedding: 1,
            generator_input: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FootprintSection {
    pub modality_microbatch: f64,
    pub llm_microbatch: f64,
}

impl Default for FootprintSection {
    fn default() -> Self {
        FootprintSection {
            modality_microbatch: 1.0,
            llm_microbatch: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct CommSection {
    #[serde(default)]
    pub rendezvous: bool,
    /// 0 means unbounded eager buffering.
    #[serde(default)]
    pub buffer_limit: usize,
}

/// Everything a subcommand needs, resolved from the TOML file.
pub struct Resolved {
    pub pipeline: PipelineConfig,
    pub placement: ModulePlacement,
    pub strategies: Vec<Strategy>,
    pub cost: CostModel,
    pub footprint: ActivationFootprint,
    pub payload_bytes: PayloadBytes,
    pub semantics: CommSemantics,
    pub seed: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn resolve(&self, seed_override: Option<u64>) -> Result<Resolved> {
        let p = &self.pipeline;
        let pipeline = PipelineConfig {
            ranks: p.ranks,
            microbatches: p.microbatches,
            virtual_chunks: p.virtual_chunks,
            warmup_units: p.warmup_units,
            llm_cp: p.llm_cp,
            enc_cp: p.enc_cp,
        };
        pipeline.validate()?;
        let placement = ModulePlacement {
            encoder_dp: self.modules.encoder_dp.unwrap_or(p.ranks),
            generator_dp: self.modules.generator_dp.unwrap_or(p.ranks),
            has_generator: self.modules.generator,
        };
        placement.validate(&pipeline)?;

        let strategies = self
            .run
            .strategies
            .iter()
            .map(|s| s.parse::<Strategy>())
            .collect::<Result<Vec<_>>>()?;

        let seed = seed_override.unwrap_or(self.run.seed);
        let unit_size = pipeline.unit_size();
        let c = &self.cost;
        let cost = CostModel {
            llm_fwd: c.llm_fwd.resolve(seed, 1, unit_size)?,
            llm_bwd: c
                .llm_bwd
                .as_ref()
                .map(|d| d.resolve(seed, 2, unit_size))
                .transpose()?,
            enc_fwd: c.enc_fwd.resolve(seed, 3, unit_size)?,
            enc_bwd: c
                .enc_bwd
                .as_ref()
                .map(|d| d.resolve(seed, 4, unit_size))
                .transpose()?,
            gen_fwd: c.gen_fwd.resolve(seed, 5, unit_size)?,
            gen_bwd: c
                .gen_bwd
                .as_ref()
                .map(|d| d.resolve(seed, 6, unit_size))
                .transpose()?,
            stage_scale: c.stage_scale.clone(),
            comm_latency: c.comm_latency,
            bandwidth: c.bandwidth,
            cp_convert: c.cp_convert,
            fsdp_mode: c.fsdp_mode.into(),
            fsdp_pull: c.fsdp_pull,
            fsdp_gather: c.fsdp_gather,
        };

        Ok(Resolved {
            pipeline,
            placement,
            strategies,
            cost,
            footprint: ActivationFootprint::new(
                self.footprint.modality_microbatch,
                self.footprint.llm_microbatch,
            )?,
            payload_bytes: PayloadBytes {
                activation: self.payload_bytes.activation,
                gradient: self.payload_bytes.gradient,
                modality_embedding: self.payload_bytes.modality_embedding,
                generator_input: self.payload_bytes.generator_input,
            },
            semantics: CommSemantics {
                rendezvous: self.comm.rendezvous,
                buffer_limit: if self.comm.buffer_limit == 0 {
                    None
                } else {
                    Some(self.comm.buffer_limit)
                },
            },
            seed,
        })
    }
}
