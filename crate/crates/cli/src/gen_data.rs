use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use htk_core::data::{gen_dataset, DatasetManifest, Split};

#[derive(Clone, Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: crate::ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generator seed; overrides `data.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn gen_data(args: &GenDataArgs) -> Result<DatasetManifest> {
    let mut cfg = args.config.load()?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    let m = gen_dataset(&cfg.data, &args.out)?;
    let clips = |s| m.clips_in(s).count();
    println!(
        "wrote {} clips ({} train, {} test) and {} inactive images: {} objects x {} actions, {}x{}, T={}",
        m.clips.len(),
        clips(Split::Train),
        clips(Split::Test),
        m.inactive.len(),
        m.objects.len(),
        m.actions.len(),
        m.config.image_size,
        m.config.image_size,
        m.config.frames,
    );
    println!("manifest {} hash {}", args.out.join("manifest.json").display(), m.hash()?);
    Ok(m)
}
