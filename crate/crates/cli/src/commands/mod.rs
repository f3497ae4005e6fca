pub mod bench;
pub mod convert;
pub mod embed;
pub mod eval;
pub mod pseudolabel;
pub mod synth;
pub mod train;

use std::path::Path;

use evadapt_core::adapter::{read_checkpoint, AdaptedClassifier};
use evadapt_core::frame::{Colormap, WindowingConfig};
use serde::Serialize;

use crate::config::Settings;
use crate::error::{invalid, write, AtPath, CliError, Result};

/// Windowing flags shared by every command that turns events into frames.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct FrameArgs {
    /// Events per window; defaults to the sensor-size rule.
    #[arg(long)]
    pub events_per_window: Option<usize>,
    /// gray or red_blue.
    #[arg(long)]
    pub colormap: Option<Colormap>,
}

impl FrameArgs {
    pub fn colormap(&self, cfg: &Settings) -> Result<Colormap> {
        cfg.get(self.colormap, "colormap", Colormap::Gray)
    }

    pub fn windowing(&self, cfg: &Settings, width: u16, height: u16) -> Result<WindowingConfig> {
        match cfg.opt(self.events_per_window, "events_per_window")? {
            Some(n) => Ok(WindowingConfig::new(n)?),
            None => Ok(WindowingConfig::for_sensor(width, height)),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<AdaptedClassifier> {
    let file = std::fs::File::open(path).map_err(|source| CliError::Input {
        path: path.into(),
        source,
    })?;
    read_checkpoint(std::io::BufReader::new(file)).at(path)
}

pub fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))? + "\n";
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn write_csv(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
