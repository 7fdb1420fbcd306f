//! `cxrlab params`: trainable parameter counts per preset.

use clap::Args;
use cxrlab_core::models::{ModelSpec, PAPER_PRESETS};
use cxrlab_core::Result;

#[derive(Args)]
pub struct ParamsArgs {
    /// Model presets (repeatable); defaults to the six full-scale presets
    #[arg(long = "model")]
    models: Vec<String>,
    #[arg(long, default_value_t = 5)]
    num_classes: usize,
}

pub fn run(args: ParamsArgs) -> Result<i32> {
    let names: Vec<String> = if args.models.is_empty() {
        PAPER_PRESETS.iter().map(|s| s.to_string()).collect()
    } else {
        args.models
    };
    println!("{:<14} {:>12} {:>10}", "model", "params", "millions");
    for name in &names {
        let spec = ModelSpec::preset(name, args.num_classes)?;
        let count = spec.parameter_count();
        println!("{:<14} {:>12} {:>10.2}", name, count, count as f64 / 1e6);
    }
    Ok(0)
}
