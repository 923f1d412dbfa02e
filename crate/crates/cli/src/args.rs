use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "facefit",
    version,
    about = "Parametric face model fitting, detail recovery and evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Model container; defaults to `model.ffa` in the asset directory.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Directory holding default assets.
    #[arg(long, global = true, env = "FACEFIT_ASSET_DIR")]
    pub assets: Option<PathBuf>,
    /// Report failures as one JSON object on stderr.
    #[arg(long, global = true)]
    pub error_json: bool,
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize the toy head model and albedo model.
    MakeToyModel {
        /// Also write the directory form next to the single file.
        #[arg(long)]
        dir_form: bool,
    },
    /// Decode a code to a mesh (template for the zero code).
    Decode {
        #[arg(long)]
        code: Option<PathBuf>,
        /// Displace the mesh with this decoder's detail.
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Render a code, or a random code drawn from the seed.
    Render {
        #[arg(long)]
        code: Option<PathBuf>,
        #[arg(long)]
        decoder: Option<PathBuf>,
    },
    /// Coarse analysis-by-synthesis fit; several images are fitted jointly.
    Fit {
        #[arg(long, required = true)]
        image: Vec<PathBuf>,
        #[arg(long, required = true)]
        landmarks: Vec<PathBuf>,
        #[arg(long)]
        mask: Vec<PathBuf>,
        /// Starting code(s) instead of the landmark initialization.
        #[arg(long)]
        init: Vec<PathBuf>,
    },
    /// Fit the detail code of one image with the coarse code fixed.
    FitDetail {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        code: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
    },
    /// Train the detail decoder, on the synthetic fixture unless a subject
    /// list is given.
    TrainDecoder {
        /// JSON list of `{subject, images: [{image, mask?, landmarks?, code}]}`.
        #[arg(long)]
        subjects: Option<PathBuf>,
        /// Starting decoder (default: seeded initialization).
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Combine one code's identity with another's expression.
    Retarget {
        #[arg(long)]
        identity: PathBuf,
        #[arg(long)]
        expression: PathBuf,
        #[arg(long)]
        decoder: PathBuf,
    },
    /// Retarget a sequence of expressions onto one identity.
    Animate {
        #[arg(long)]
        identity: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        expressions: Vec<PathBuf>,
        #[arg(long)]
        decoder: PathBuf,
        /// Also write one OBJ per frame.
        #[arg(long)]
        obj: bool,
    },
    /// Scan-to-mesh distances after optional rigid alignment.
    Eval {
        #[arg(long)]
        scan: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        /// 3D landmarks on the scan (one `x y z` per line).
        #[arg(long, requires = "mesh_landmarks")]
        scan_landmarks: Option<PathBuf>,
        #[arg(long, requires = "scan_landmarks")]
        mesh_landmarks: Option<PathBuf>,
        #[arg(long)]
        icp: bool,
        #[arg(long)]
        with_scale: bool,
        /// Largest threshold of the cumulative curve (mm).
        #[arg(long, default_value_t = 10.0)]
        max_threshold: f64,
        #[arg(long, default_value_t = 101)]
        thresholds: usize,
    },
    /// Landmark-consistency check between two detections.
    FilterLandmarks {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long, num_args = 2, value_names = ["W", "H"])]
        bbox: Vec<f64>,
        #[arg(long, num_args = 2, value_names = ["DX", "DY"], allow_negative_numbers = true)]
        shift: Option<Vec<f64>>,
        #[arg(long, default_value_t = facefit::eval::DEFAULT_FILTER_THRESHOLD)]
        threshold: f64,
    },
}
