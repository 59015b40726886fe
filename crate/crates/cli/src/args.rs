//! Flag definitions and their conversion into a [`SpecLayer`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use repeater_core::Protocol;

use crate::spec::{Format, Mode, ParseError, SpecLayer, OUTPUT_DIR_ENV};
use crate::ExperimentSpec;

#[derive(Debug, Parser)]
#[command(name = "repeater", version, about = "Repeater chain relay simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one configuration for each selected protocol.
    Run(SpecArgs),
    /// Run the configuration for every M in --sweep-m.
    Sweep(SpecArgs),
    /// Run the statevector checks of the emission/absorption circuit.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct SpecArgs {
    /// JSON config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Protocols to run (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub protocol: Option<Vec<Protocol>>,
    /// Repeater nodes between sender and receiver.
    #[arg(long, allow_negative_numbers = true)]
    pub nodes: Option<i64>,
    /// Memories per node.
    #[arg(long, allow_negative_numbers = true)]
    pub m: Option<i64>,
    /// Per-attempt success probability.
    #[arg(long)]
    pub p: Option<f64>,
    /// Slot duration in seconds.
    #[arg(long)]
    pub t0: Option<f64>,
    /// Segment length in meters (recorded only).
    #[arg(long)]
    pub l0: Option<f64>,
    /// Stop after this many slots.
    #[arg(long, allow_negative_numbers = true)]
    pub slots: Option<i64>,
    /// Stop once this many qubits have arrived.
    #[arg(long, allow_negative_numbers = true)]
    pub target: Option<i64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub replications: Option<i64>,
    /// M values for the sweep subcommand (comma separated).
    #[arg(long = "sweep-m", value_delimiter = ',', allow_negative_numbers = true)]
    pub sweep_m: Option<Vec<i64>>,
    /// Output directory.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Output formats (comma separated: csv,json).
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<Format>>,
    /// Time-series sampling interval in slots.
    #[arg(long, allow_negative_numbers = true)]
    pub sample_every: Option<i64>,
    /// Fraction of the run discarded before fitting throughput.
    #[arg(long)]
    pub burn_in: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct OracleArgs {
    /// Number of random payload states.
    #[arg(long, default_value_t = crate::oracle_suite::DEFAULT_PAYLOADS)]
    pub payloads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write oracle.json here.
    #[arg(long, env = OUTPUT_DIR_ENV)]
    pub out: Option<PathBuf>,
}

impl SpecArgs {
    pub fn layer(&self) -> SpecLayer {
        SpecLayer {
            protocols: self.protocol.clone(),
            n_repeaters: self.nodes,
            m_per_node: self.m,
            p_success: self.p,
            t0_seconds: self.t0,
            l0_meters: self.l0,
            max_slots: self.slots,
            target_completions: self.target,
            seed: self.seed,
            replications: self.replications,
            sweep: self.sweep_m.clone(),
            output_dir: self.out.clone(),
            formats: self.formats.clone(),
            sample_every: self.sample_every,
            burn_in_fraction: self.burn_in,
        }
    }

    /// File layer (if any) with flags on top, validated for `mode`.
    pub fn to_spec(&self, mode: Mode) -> Result<ExperimentSpec, ParseError> {
        let base = match &self.config {
            Some(path) => SpecLayer::from_file(path)?,
            None => SpecLayer::default(),
        };
        base.overlay(&self.layer()).build(mode)
    }
}
