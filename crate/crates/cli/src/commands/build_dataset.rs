//! `sdnia build-dataset`: toy shapes generation, synthetic degradation of a
//! labeled set, and mixing originals with stylized data.

use std::path::PathBuf;

use clap::{Args, Subcommand};

use sdnia_core::imagery::{
    degrade_manifest, load_dataset, mix_datasets, save_dataset, DegradeMode, Split,
};
use sdnia_core::synthdata::{generate_shapes, style_image, ShapesConfig, StyleKind};
use sdnia_core::{Error, Result};

use crate::config::{require_exists, RunConfig};
use crate::output::{ensure_dir, ProducedFiles};
use crate::Outcome;

#[derive(Args)]
pub struct BuildDatasetArgs {
    #[command(subcommand)]
    pub kind: BuildKind,
}

#[derive(Subcommand)]
pub enum BuildKind {
    /// Generate the synthetic shapes dataset plus example style images.
    Shapes {
        /// Training images to generate.
        #[arg(long, default_value_t = 200)]
        train: usize,
        /// Clean test images to generate.
        #[arg(long, default_value_t = 50)]
        test: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write a degraded copy of the test split.
        #[arg(long, default_value_t = true)]
        degrade_test: bool,
    },
    /// Apply synthetic fog / gamma degradation to a labeled manifest.
    Degrade {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = DegradeArg::Mixed)]
        mode: DegradeArg,
    },
    /// Mix originals with stylized data into one training manifest.
    Mix {
        #[arg(long)]
        originals: PathBuf,
        #[arg(long)]
        stylized: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
pub enum DegradeArg {
    Fog,
    Gamma,
    Mixed,
}

impl From<DegradeArg> for DegradeMode {
    fn from(v: DegradeArg) -> Self {
        match v {
            DegradeArg::Fog => DegradeMode::Fog,
            DegradeArg::Gamma => DegradeMode::Gamma,
            DegradeArg::Mixed => DegradeMode::Mixed,
        }
    }
}

pub fn run(config: &RunConfig, args: BuildDatasetArgs) -> Result<Outcome> {
    let out_dir = config.output_dir();
    let mut produced = ProducedFiles::default();
    match args.kind {
        BuildKind::Shapes {
            train,
            test,
            size,
            degrade_test,
        } => {
            if train == 0 || test == 0 {
                return Err(Error::Config("shapes: train and test must be >= 1".into()));
            }
            if size < 32 || size % 32 != 0 {
                return Err(Error::Config(
                    "shapes: size must be a positive multiple of 32".into(),
                ));
            }
            ensure_dir(&out_dir)?;
            let shapes_cfg = ShapesConfig {
                image_size: size,
                ..ShapesConfig::default()
            };
            let train_m = generate_shapes(
                "shapes_train",
                Split::Train,
                train,
                &shapes_cfg,
                config.seed,
                Some(&out_dir.join("train")),
            )?;
            let train_path = out_dir.join("train.json");
            save_dataset(&train_m, &train_path)?;
            produced.add(&train_path);

            let test_m = generate_shapes(
                "shapes_test",
                Split::Test,
                test,
                &shapes_cfg,
                config.seed ^ 0x7E57,
                Some(&out_dir.join("test_clean")),
            )?;
            let test_path = out_dir.join("test_clean.json");
            save_dataset(&test_m, &test_path)?;
            produced.add(&test_path);

            let styles_dir = out_dir.join("styles");
            ensure_dir(&styles_dir)?;
            for kind in [StyleKind::Fog, StyleKind::Night] {
                let s = style_image(kind, 64, config.seed ^ 0x57E1);
                let p = styles_dir.join(format!("{}.png", s.id));
                s.pixels.save_png(&p)?;
                produced.add(&p);
            }

            if degrade_test {
                let degraded = degrade_manifest(
                    &test_m,
                    DegradeMode::Mixed,
                    Some(&out_dir.join("test_degraded")),
                    config.seed ^ 0xDE64,
                )?;
                let degraded_path = out_dir.join("test_degraded.json");
                save_dataset(&degraded, &degraded_path)?;
                produced.add(&degraded_path);
            }
            println!(
                "shapes dataset: {train} train / {test} test images at {size}x{size} in {}",
                out_dir.display()
            );
        }
        BuildKind::Degrade { manifest, mode } => {
            require_exists(&manifest, "input manifest")?;
            ensure_dir(&out_dir)?;
            let loaded = load_dataset(&manifest)?;
            for d in &loaded.diagnostics {
                eprintln!("warning: {d}");
            }
            let degraded = degrade_manifest(
                &loaded.manifest,
                mode.into(),
                Some(&out_dir.join("degraded")),
                config.seed,
            )?;
            let path = out_dir.join("degraded.json");
            save_dataset(&degraded, &path)?;
            produced.add(&path);
            println!("degraded {} images into {}", degraded.len(), path.display());
        }
        BuildKind::Mix {
            originals,
            stylized,
            out,
        } => {
            require_exists(&originals, "originals manifest")?;
            require_exists(&stylized, "stylized manifest")?;
            let o = load_dataset(&originals)?;
            let s = load_dataset(&stylized)?;
            for d in o.diagnostics.iter().chain(&s.diagnostics) {
                eprintln!("warning: {d}");
            }
            let mixed = mix_datasets(&o.manifest, &s.manifest)?;
            // Keep image paths resolvable from the new manifest location.
            save_dataset(&mixed, &out)?;
            produced.add(&out);
            println!(
                "mixed manifest: {} originals + {} stylized = {} entries at {}",
                o.manifest.len(),
                s.manifest.len(),
                mixed.len(),
                out.display()
            );
        }
    }
    produced.write(&out_dir)?;
    Ok(Outcome::Success)
}
