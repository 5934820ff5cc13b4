//! Run configuration: every tunable with its default and where the default
//! comes from. Files hold `key = value` lines; `#` starts a comment.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::association::PointFilterParams;
use crate::dynamics::{DynamicsParams, LlgReduction};
use crate::estimation::{EstimationParams, LmParams};
use crate::ggs::GgsParams;
use crate::loopclosure::LoopParams;
use crate::mapping::BaParams;

/// Whether a default is stated by the method's authors or chosen here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Paper,
    Repo,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Paper => "paper",
            Provenance::Repo => "repo",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: {source}")]
    Line { line: usize, source: Box<ConfigError> },
    #[error("line {0}: expected 'key = value'")]
    Syntax(usize),
}

/// Grid size written `COLSxROWS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSize {
    pub cols: u32,
    pub rows: u32,
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.cols, self.rows)
    }
}

impl FromStr for GridSize {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (c, r) = s.split_once('x').ok_or("expected COLSxROWS")?;
        let cols: u32 = c.trim().parse().map_err(|_| "bad column count")?;
        let rows: u32 = r.trim().parse().map_err(|_| "bad row count")?;
        if cols == 0 || rows == 0 {
            return Err("grid dimensions must be positive".into());
        }
        Ok(Self { cols, rows })
    }
}

/// A value that may be left to the run (`auto`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Auto(pub Option<f64>);

impl fmt::Display for Auto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v}"),
            None => f.write_str("auto"),
        }
    }
}

impl FromStr for Auto {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Auto(None));
        }
        s.parse::<f64>().map(|v| Auto(Some(v))).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Reduction(pub LlgReduction);

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self.0 {
            LlgReduction::Mean => "mean",
            LlgReduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Reduction(LlgReduction::Mean)),
            "sum" => Ok(Reduction(LlgReduction::Sum)),
            _ => Err("expected 'mean' or 'sum'".into()),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:expr])* $name:ident : $ty:ty = $default:expr, $prov:ident;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($name) => {
                        self.$name = value.parse::<$ty>().map_err(|e| ConfigError::BadValue {
                            key: key.to_string(),
                            value: value.to_string(),
                            reason: e.to_string(),
                        })?;
                    })*
                    other => return Err(ConfigError::UnknownKey(other.to_string())),
                }
                self.validate_key(key.trim(), value)
            }

            /// Every key with its current value and provenance, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String, Provenance)> {
                vec![$((stringify!($name), self.$name.to_string(), Provenance::$prov)),*]
            }
        }
    };
}

run_config! {
    /// Point filter multiplier on the mean cross-value change.
    alpha_point: f64 = 1.5, Paper;
    /// Additive slack of the point filter threshold.
    epsilon_point: f64 = 1.0, Repo;
    /// Peers used when a point is alone in its grid cell.
    fallback_neighbors: usize = 8, Repo;
    point_grid: GridSize = GridSize { cols: 64, rows: 48 }, Paper;
    ggs_scale: f64 = 0.8, Paper;
    ggs_grid: GridSize = GridSize { cols: 4, rows: 3 }, Paper;
    kf_coeff: f64 = 0.4, Paper;
    /// First keyframe threshold as a multiple of the first post-keyframe score.
    kf_bootstrap: f64 = 3.0, Repo;
    /// Force a keyframe after this many frames (0 disables).
    kf_max_gap: usize = 10, Repo;
    covis_min: usize = 20, Paper;
    /// Keyframes within which a feature id re-attaches to its landmark.
    reassociate_window: usize = 5, Repo;
    tau_pt: f64 = 4.0, Repo;
    rho: f64 = 4.0, Repo;
    llg_reduction: Reduction = Reduction(LlgReduction::Mean), Repo;
    huber_delta: f64 = 2.0, Repo;
    edge_margin: f64 = 20.0, Repo;
    /// Residual norm under which a tracked feature counts as an inlier (px).
    inlier_threshold: f64 = 3.0, Repo;
    information_point: f64 = 1.0, Repo;
    information_line: f64 = 1.0, Repo;
    lm_lambda: f64 = 1e-4, Repo;
    lm_lambda_up: f64 = 10.0, Repo;
    lm_lambda_down: f64 = 0.5, Repo;
    lm_max_iters: usize = 30, Repo;
    ba_max_iters: usize = 50, Repo;
    lm_step_tol: f64 = 1e-8, Repo;
    lm_cost_tol: f64 = 1e-9, Repo;
    lc_alpha: f64 = 0.001, Paper;
    inlier_min: f64 = 0.5, Paper;
    lc_min: f64 = 0.2, Paper;
    pgo_covis_fraction: f64 = 0.2, Paper;
    exclusion_window: usize = 30, Repo;
    /// Loop threshold on the similarity score; `auto` scales the run's median.
    sim_threshold: Auto = Auto(None), Repo;
    sim_factor: f64 = 2.0, Repo;
    neighbor_factor: f64 = 1.5, Repo;
    max_drift_fraction: f64 = 0.1, Repo;
    max_candidates: usize = 3, Repo;
    use_dynamic: bool = true, Repo;
    use_loop: bool = true, Repo;
    use_lines: bool = true, Repo;
    use_horizontal: bool = true, Repo;
    local_ba: bool = true, Repo;
    global_ba: bool = true, Repo;
    strict_paper_lcd: bool = false, Repo;
    seed: u64 = 0, Repo;
}

impl RunConfig {
    fn validate_key(&self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| {
            Err(ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: reason.to_string(),
            })
        };
        match key {
            "ggs_scale" if !(self.ggs_scale > 0.0 && self.ggs_scale <= 1.0) => bad("must lie in (0, 1]"),
            "lm_lambda_up" if !(self.lm_lambda_up > 1.0) => bad("must exceed 1"),
            "lm_lambda_down" if !(self.lm_lambda_down > 0.0 && self.lm_lambda_down < 1.0) => bad("must lie in (0, 1)"),
            "inlier_min" | "lc_min" | "pgo_covis_fraction" => {
                let v: f64 = value.parse().unwrap_or(f64::NAN);
                if (0.0..=1.0).contains(&v) {
                    Ok(())
                } else {
                    bad("must lie in [0, 1]")
                }
            }
            _ => {
                let v = value.parse::<f64>();
                match v {
                    Ok(v) if v.is_nan() || v < 0.0 => bad("must be a non-negative number"),
                    _ => Ok(()),
                }
            }
        }
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            let (k, v) = l.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            self.set(k, v).map_err(|e| ConfigError::Line {
                line: i + 1,
                source: Box::new(e),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Fully resolved configuration, one `key = value  # provenance` per line.
    pub fn echo(&self) -> String {
        let entries = self.entries();
        let width = entries.iter().map(|(k, v, _)| k.len() + v.len()).max().unwrap_or(0) + 3;
        entries
            .into_iter()
            .map(|(k, v, p)| {
                let kv = format!("{k} = {v}");
                format!("{kv:width$}  # {p}\n")
            })
            .collect()
    }

    pub fn lm(&self) -> LmParams {
        LmParams {
            lambda_init: self.lm_lambda,
            lambda_up: self.lm_lambda_up,
            lambda_down: self.lm_lambda_down,
            max_iters: self.lm_max_iters,
            step_tol: self.lm_step_tol,
            cost_tol: self.lm_cost_tol,
        }
    }

    pub fn estimation(&self) -> EstimationParams {
        EstimationParams {
            lm: self.lm(),
            huber_delta: self.huber_delta,
            edge_margin: self.edge_margin,
            use_lines: self.use_lines,
            use_horizontal: self.use_horizontal,
            inlier_threshold: self.inlier_threshold,
            information_point: self.information_point,
            information_line: self.information_line,
        }
    }

    pub fn ba(&self) -> BaParams {
        BaParams {
            lm: LmParams {
                max_iters: self.ba_max_iters,
                ..self.lm()
            },
            huber_delta: self.huber_delta,
            edge_margin: self.edge_margin,
            use_lines: self.use_lines,
            use_horizontal: self.use_horizontal,
            include_outside_observers: true,
        }
    }

    pub fn point_filter(&self) -> PointFilterParams {
        PointFilterParams {
            alpha: self.alpha_point,
            epsilon: self.epsilon_point,
            grid_cols: self.point_grid.cols,
            grid_rows: self.point_grid.rows,
            fallback_neighbors: self.fallback_neighbors,
        }
    }

    pub fn dynamics(&self) -> DynamicsParams {
        DynamicsParams {
            tau_pt: self.tau_pt,
            rho: self.rho,
            reduction: self.llg_reduction.0,
        }
    }

    pub fn ggs(&self) -> GgsParams {
        GgsParams {
            scale: self.ggs_scale,
            cols: self.ggs_grid.cols,
            rows: self.ggs_grid.rows,
        }
    }

    pub fn loops(&self) -> LoopParams {
        LoopParams {
            exclusion_window: self.exclusion_window,
            sim_threshold: self.sim_threshold.0,
            sim_factor: self.sim_factor,
            neighbor_factor: self.neighbor_factor,
            inlier_min: self.inlier_min,
            lc_alpha: self.lc_alpha,
            lc_min: self.lc_min,
            strict_paper: self.strict_paper_lcd,
            max_drift_fraction: self.max_drift_fraction,
            max_candidates: self.max_candidates,
            pgo_covis_fraction: self.pgo_covis_fraction,
        }
    }
}
