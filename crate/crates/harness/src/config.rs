//! Evaluation configuration: defaults, a `key=value` file format, and
//! explicit precedence (command line over file over defaults).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::HarnessError;
use c2f_core::geometry::Scenario;

/// Which part of the pipeline the evaluation runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Global feature alignment only.
    Coarse,
    /// Global alignment followed by local refinement.
    Full,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Coarse => "coarse",
            Stage::Full => "full",
        }
    }
}

impl FromStr for Stage {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Stage, HarnessError> {
        match s {
            "coarse" => Ok(Stage::Coarse),
            "full" => Ok(Stage::Full),
            other => Err(HarnessError::Config(format!("unknown stage '{other}'"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How partial-overlap pairs are cropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CropMethod {
    /// Farthest-point traversal from a random start (default).
    Fps,
    /// Random half-space cut.
    Halfspace,
}

impl CropMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CropMethod::Fps => "fps",
            CropMethod::Halfspace => "halfspace",
        }
    }
}

impl FromStr for CropMethod {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<CropMethod, HarnessError> {
        match s {
            "fps" => Ok(CropMethod::Fps),
            "halfspace" => Ok(CropMethod::Halfspace),
            other => Err(HarnessError::Config(format!("unknown crop method '{other}'"))),
        }
    }
}

impl fmt::Display for CropMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fully resolved evaluation protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub scenario: Scenario,
    pub stage: Stage,
    /// Upper bounds of the sampled Euler angles, one report column each.
    pub angle_ranges: Vec<f64>,
    pub max_translation: f64,
    pub instances: usize,
    pub points_per_cloud: usize,
    /// Fraction kept per cloud in the partial-overlap scenario.
    pub keep_ratio: f64,
    pub crop: CropMethod,
    pub refine_iterations: usize,
    pub seed: u64,
    /// Worker threads; 0 uses the process default.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            scenario: Scenario::Clean,
            stage: Stage::Coarse,
            angle_ranges: vec![45.0, 90.0, 135.0, 180.0],
            max_translation: 0.5,
            instances: 200,
            points_per_cloud: 1024,
            keep_ratio: 0.75,
            crop: CropMethod::Fps,
            refine_iterations: 3,
            seed: 0,
            threads: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.angle_ranges.is_empty() {
            return Err(HarnessError::Config("need at least one angle range".into()));
        }
        for a in &self.angle_ranges {
            if !a.is_finite() || !(0.0..=180.0).contains(a) {
                return Err(HarnessError::Config(format!("angle bound {a} outside [0, 180]")));
            }
        }
        if !self.max_translation.is_finite() || self.max_translation < 0.0 {
            return Err(HarnessError::Config("max_trans must be non-negative".into()));
        }
        if self.instances == 0 {
            return Err(HarnessError::Config("need at least one instance".into()));
        }
        if self.points_per_cloud < 24 {
            return Err(HarnessError::Config(
                "need at least 24 points per cloud so refinement keeps 3".into(),
            ));
        }
        if !self.keep_ratio.is_finite() || self.keep_ratio <= 0.0 || self.keep_ratio > 1.0 {
            return Err(HarnessError::Config("keep_ratio must lie in (0, 1]".into()));
        }
        if self.refine_iterations == 0 {
            return Err(HarnessError::Config("refine_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Partial configuration, every field optional. Sources (command line,
/// config file) each produce one; merging keeps the stronger side.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalOverrides {
    pub scenario: Option<Scenario>,
    pub stage: Option<Stage>,
    pub angle_ranges: Option<Vec<f64>>,
    pub max_translation: Option<f64>,
    pub instances: Option<usize>,
    pub points_per_cloud: Option<usize>,
    pub keep_ratio: Option<f64>,
    pub crop: Option<CropMethod>,
    pub refine_iterations: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl EvalOverrides {
    /// Fields set on `self` win; holes fall through to `weaker`.
    pub fn over(self, weaker: EvalOverrides) -> EvalOverrides {
        EvalOverrides {
            scenario: self.scenario.or(weaker.scenario),
            stage: self.stage.or(weaker.stage),
            angle_ranges: self.angle_ranges.or(weaker.angle_ranges),
            max_translation: self.max_translation.or(weaker.max_translation),
            instances: self.instances.or(weaker.instances),
            points_per_cloud: self.points_per_cloud.or(weaker.points_per_cloud),
            keep_ratio: self.keep_ratio.or(weaker.keep_ratio),
            crop: self.crop.or(weaker.crop),
            refine_iterations: self.refine_iterations.or(weaker.refine_iterations),
            seed: self.seed.or(weaker.seed),
            threads: self.threads.or(weaker.threads),
        }
    }

    /// Fills the remaining holes with defaults and validates.
    pub fn resolve(self) -> Result<EvalConfig, HarnessError> {
        let d = EvalConfig::default();
        let config = EvalConfig {
            scenario: self.scenario.unwrap_or(d.scenario),
            stage: self.stage.unwrap_or(d.stage),
            angle_ranges: self.angle_ranges.unwrap_or(d.angle_ranges),
            max_translation: self.max_translation.unwrap_or(d.max_translation),
            instances: self.instances.unwrap_or(d.instances),
            points_per_cloud: self.points_per_cloud.unwrap_or(d.points_per_cloud),
            keep_ratio: self.keep_ratio.unwrap_or(d.keep_ratio),
            crop: self.crop.unwrap_or(d.crop),
            refine_iterations: self.refine_iterations.unwrap_or(d.refine_iterations),
            seed: self.seed.unwrap_or(d.seed),
            threads: self.threads.unwrap_or(d.threads),
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parses a comma-separated angle list such as `45,90,135,180`.
pub fn parse_angles(s: &str) -> Result<Vec<f64>, HarnessError> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| HarnessError::Config(format!("bad angle '{tok}'")))
        })
        .collect()
}

/// Reads a `key=value` configuration file. Blank lines and `#` comments are
/// skipped; unknown keys are errors so typos cannot silently change a run.
pub fn parse_config_file(path: &Path) -> Result<EvalOverrides, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    let mut o = EvalOverrides::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            HarnessError::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| {
            HarnessError::Config(format!(
                "{}:{}: bad {what} '{value}'",
                path.display(),
                lineno + 1
            ))
        };
        match key {
            "scenario" => o.scenario = Some(value.parse().map_err(|_| bad("scenario"))?),
            "stage" => o.stage = Some(value.parse()?),
            "angles" => o.angle_ranges = Some(parse_angles(value)?),
            "max_trans" => o.max_translation = Some(value.parse().map_err(|_| bad("number"))?),
            "instances" => o.instances = Some(value.parse().map_err(|_| bad("count"))?),
            "points" => o.points_per_cloud = Some(value.parse().map_err(|_| bad("count"))?),
            "keep_ratio" => o.keep_ratio = Some(value.parse().map_err(|_| bad("number"))?),
            "crop" => o.crop = Some(value.parse()?),
            "iterations" => {
                o.refine_iterations = Some(value.parse().map_err(|_| bad("count"))?)
            }
            "seed" => o.seed = Some(value.parse().map_err(|_| bad("seed"))?),
            "threads" => o.threads = Some(value.parse().map_err(|_| bad("count"))?),
            other => {
                return Err(HarnessError::Config(format!(
                    "{}:{}: unknown key '{other}'",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn command_line_beats_file_beats_default() {
        let file = EvalOverrides {
            instances: Some(10),
            seed: Some(5),
            stage: Some(Stage::Full),
            ..EvalOverrides::default()
        };
        let cli = EvalOverrides { instances: Some(3), ..EvalOverrides::default() };
        let cfg = cli.over(file).resolve().unwrap();
        assert_eq!(cfg.instances, 3, "command line wins");
        assert_eq!(cfg.seed, 5, "file fills the hole");
        assert_eq!(cfg.stage, Stage::Full);
        assert_eq!(cfg.points_per_cloud, 1024, "default fills the rest");
    }

    #[test]
    fn config_file_round_trip() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            f,
            "# evaluation protocol\nscenario = noisy\nstage=full\nangles = 90, 180\n\ninstances=25\ncrop=halfspace\nkeep_ratio=0.6"
        )
        .unwrap();
        let o = parse_config_file(f.path()).unwrap();
        assert_eq!(o.scenario, Some(Scenario::Noisy));
        assert_eq!(o.stage, Some(Stage::Full));
        assert_eq!(o.angle_ranges, Some(vec![90.0, 180.0]));
        assert_eq!(o.instances, Some(25));
        assert_eq!(o.crop, Some(CropMethod::Halfspace));
        assert_eq!(o.keep_ratio, Some(0.6));
        assert_eq!(o.threads, None);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "speed=11").unwrap();
        assert!(parse_config_file(f.path()).is_err());

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "instances=many").unwrap();
        assert!(parse_config_file(f.path()).is_err());

        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "no equals sign").unwrap();
        assert!(parse_config_file(f.path()).is_err());
    }

    #[test]
    fn validation_rejects_out_of_range_protocols() {
        for (patch, _) in [
            (EvalOverrides { angle_ranges: Some(vec![]), ..Default::default() }, "empty"),
            (EvalOverrides { angle_ranges: Some(vec![200.0]), ..Default::default() }, "angle"),
            (EvalOverrides { instances: Some(0), ..Default::default() }, "instances"),
            (EvalOverrides { points_per_cloud: Some(10), ..Default::default() }, "points"),
            (EvalOverrides { keep_ratio: Some(1.5), ..Default::default() }, "ratio"),
            (EvalOverrides { refine_iterations: Some(0), ..Default::default() }, "iters"),
            (EvalOverrides { max_translation: Some(-1.0), ..Default::default() }, "trans"),
        ] {
            assert!(patch.resolve().is_err());
        }
        assert!(EvalOverrides::default().resolve().is_ok());
    }
}
