//! Run configuration: plain key=value text with documented defaults.

use std::fmt::Write as _;

use drivekit::BevGridSpec;
use drivekit::scene::LidarPattern;

/// Every knob of the end-to-end pipeline, with defaults that run in seconds.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub frames: usize,
    pub n_lanes: usize,
    pub n_boxes: usize,
    pub n_pedestrians: usize,
    pub n_views: u32,
    pub world_extent: f64,
    pub frame_period: f64,
    pub cell_size: f64,
    pub n_z_bins: usize,
    pub azimuths: usize,
    pub rings: usize,
    pub max_range: f64,
    pub flow_steps: usize,
    pub post_threshold: f64,
    pub clip_tau: f64,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            frames: 8,
            n_lanes: 2,
            n_boxes: 6,
            n_pedestrians: 2,
            n_views: 3,
            world_extent: 40.0,
            frame_period: 0.5,
            cell_size: 0.4,
            n_z_bins: 20,
            azimuths: 120,
            rings: 16,
            max_range: 70.0,
            flow_steps: 16,
            post_threshold: 0.5,
            clip_tau: 0.5,
            out: "runs/run0".into(),
        }
    }
}

impl RunConfig {
    /// Grid spec implied by the config (fixed +-51.2 m footprint, -3..5 m z).
    pub fn grid_spec(&self) -> BevGridSpec {
        BevGridSpec {
            cell_size_xy: self.cell_size,
            n_z_bins: self.n_z_bins,
            ..BevGridSpec::default()
        }
    }

    pub fn lidar_pattern(&self) -> LidarPattern {
        make_pattern(self.azimuths, self.rings, self.max_range)
    }
}

/// Spinning pattern with `rings` elevations spread from -60 to -6 degrees.
pub fn make_pattern(azimuths: usize, rings: usize, max_range: f64) -> LidarPattern {
    let elevations = (0..rings)
        .map(|i| {
            let frac = if rings > 1 { i as f64 / (rings - 1) as f64 } else { 0.0 };
            (-60.0 + 54.0 * frac).to_radians()
        })
        .collect();
    LidarPattern { azimuth_count: azimuths.max(1), elevations, max_range }
}

/// Parses key=value text. `#` starts a comment; blank lines are skipped.
/// Unknown keys produce warnings; every violation is reported, not just the
/// first one.
pub fn validate_config(text: &str) -> Result<(RunConfig, Vec<String>), Vec<String>> {
    let mut config = RunConfig::default();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            errors.push(format!("line {}: expected key=value, got {:?}", lineno + 1, line));
            continue;
        };
        let (key, value) = (key.trim(), value.trim());

        macro_rules! set {
            ($field:ident, $ty:ty) => {
                match value.parse::<$ty>() {
                    Ok(v) => config.$field = v,
                    Err(e) => errors.push(format!("line {}: {key}: {e}", lineno + 1)),
                }
            };
        }
        match key {
            "seed" => set!(seed, u64),
            "frames" => set!(frames, usize),
            "n_lanes" => set!(n_lanes, usize),
            "n_boxes" => set!(n_boxes, usize),
            "n_pedestrians" => set!(n_pedestrians, usize),
            "n_views" => set!(n_views, u32),
            "world_extent" => set!(world_extent, f64),
            "frame_period" => set!(frame_period, f64),
            "cell_size" => set!(cell_size, f64),
            "n_z_bins" => set!(n_z_bins, usize),
            "azimuths" => set!(azimuths, usize),
            "rings" => set!(rings, usize),
            "max_range" => set!(max_range, f64),
            "flow_steps" => set!(flow_steps, usize),
            "post_threshold" => set!(post_threshold, f64),
            "clip_tau" => set!(clip_tau, f64),
            "out" => config.out = value.to_string(),
            other => warnings.push(format!("line {}: unknown key {other:?} ignored", lineno + 1)),
        }
    }

    check_ranges(&config, &mut errors);
    if errors.is_empty() {
        Ok((config, warnings))
    } else {
        Err(errors)
    }
}

fn check_ranges(config: &RunConfig, errors: &mut Vec<String>) {
    if config.frames == 0 {
        errors.push("frames: must be >= 1".into());
    }
    if config.n_lanes == 0 && config.n_boxes == 0 {
        errors.push("n_lanes/n_boxes: scene needs at least one lane or box".into());
    }
    if !(1..=12).contains(&config.n_views) {
        errors.push(format!("n_views: must be in 1..=12, got {}", config.n_views));
    }
    if !(config.world_extent > 0.0) {
        errors.push(format!("world_extent: must be > 0, got {}", config.world_extent));
    }
    if !(config.frame_period > 0.0) {
        errors.push(format!("frame_period: must be > 0, got {}", config.frame_period));
    } else {
        // The evaluation needs frames at the 1, 2 and 3 second horizons.
        let needed = (3.0 / config.frame_period).round() as usize + 1;
        if config.frames != 0 && config.frames < needed {
            errors.push(format!(
                "frames: need at least {needed} frames to cover the 3 s horizon at \
                 frame_period {}, got {}",
                config.frame_period, config.frames
            ));
        }
    }
    let spec = config.grid_spec();
    if let Err(e) = spec.validate() {
        errors.push(format!("grid spec: {e}"));
    } else if spec.nx() % 8 != 0 || spec.ny() % 8 != 0 {
        errors.push(format!(
            "grid spec: {}x{} grid is not divisible by 8",
            spec.nx(),
            spec.ny()
        ));
    }
    if config.azimuths == 0 {
        errors.push("azimuths: must be >= 1".into());
    }
    if config.rings == 0 {
        errors.push("rings: must be >= 1".into());
    }
    if !(config.max_range > 0.0) {
        errors.push(format!("max_range: must be > 0, got {}", config.max_range));
    }
    if config.flow_steps == 0 {
        errors.push("flow_steps: must be >= 1".into());
    }
    if !(0.0..=1.0).contains(&config.post_threshold) {
        errors.push(format!("post_threshold: must be in [0, 1], got {}", config.post_threshold));
    }
    if !(0.0..=1.0).contains(&config.clip_tau) {
        errors.push(format!("clip_tau: must be in [0, 1], got {}", config.clip_tau));
    }
    if config.out.is_empty() {
        errors.push("out: must not be empty".into());
    }
}

/// Renders the effective config back to key=value text (for run manifests).
pub fn render_config(config: &RunConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", config.seed);
    let _ = writeln!(s, "frames = {}", config.frames);
    let _ = writeln!(s, "n_lanes = {}", config.n_lanes);
    let _ = writeln!(s, "n_boxes = {}", config.n_boxes);
    let _ = writeln!(s, "n_pedestrians = {}", config.n_pedestrians);
    let _ = writeln!(s, "n_views = {}", config.n_views);
    let _ = writeln!(s, "world_extent = {}", config.world_extent);
    let _ = writeln!(s, "frame_period = {}", config.frame_period);
    let _ = writeln!(s, "cell_size = {}", config.cell_size);
    let _ = writeln!(s, "n_z_bins = {}", config.n_z_bins);
    let _ = writeln!(s, "azimuths = {}", config.azimuths);
    let _ = writeln!(s, "rings = {}", config.rings);
    let _ = writeln!(s, "max_range = {}", config.max_range);
    let _ = writeln!(s, "flow_steps = {}", config.flow_steps);
    let _ = writeln!(s, "post_threshold = {}", config.post_threshold);
    let _ = writeln!(s, "clip_tau = {}", config.clip_tau);
    let _ = writeln!(s, "out = {}", config.out);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let (config, warnings) = validate_config("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert!(warnings.is_empty());
    }

    #[test]
    fn two_bad_fields_give_two_errors() {
        let errors = validate_config("frames = 0\npost_threshold = 1.5\n").unwrap_err();
        assert_eq!(errors.len(), 2, "{errors:?}");
    }

    #[test]
    fn unknown_key_is_warning_not_error() {
        let (config, warnings) = validate_config("gpu = on\nseed = 9\n").unwrap();
        assert_eq!(config.seed, 9);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("gpu"));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let (config, warnings) = validate_config("# a comment\n\nseed = 3 # trailing\n").unwrap();
        assert_eq!(config.seed, 3);
        assert!(warnings.is_empty());
    }

    #[test]
    fn bad_grid_spec_is_reported() {
        let errors = validate_config("cell_size = 0.3\n").unwrap_err();
        assert!(errors.iter().any(|e| e.contains("grid spec")), "{errors:?}");
    }

    #[test]
    fn render_parse_round_trip() {
        let (config, _) = validate_config("seed = 42\nframes = 12\n").unwrap();
        let (back, _) = validate_config(&render_config(&config)).unwrap();
        assert_eq!(config, back);
    }
}
