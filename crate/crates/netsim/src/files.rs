//! Network and policy files. Classes and stations are 1-based here and
//! 0-based in `netsim_core`.

use std::collections::BTreeMap;
use std::path::Path;

use netsim_core::linalg::Matrix;
use netsim_core::{NetworkSpec, PriorityPolicy};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum FileError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] netsim_core::Error),
}

/// Routing given either as rows or as one row-major list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Routing {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub classes: usize,
    pub stations: usize,
    pub station_of: Vec<usize>,
    pub arrival_rates: Vec<f64>,
    pub service_rates: Vec<f64>,
    pub routing: Routing,
}

impl NetworkFile {
    pub fn from_spec(spec: &NetworkSpec) -> Self {
        let n = spec.num_classes();
        let r = spec.routing();
        Self {
            classes: n,
            stations: spec.num_stations(),
            station_of: spec.station_map().iter().map(|s| s + 1).collect(),
            arrival_rates: spec.arrival_rates().to_vec(),
            service_rates: spec.service_rates().to_vec(),
            routing: Routing::Rows((0..n).map(|i| r.row(i).to_vec()).collect()),
        }
    }

    pub fn to_spec(&self) -> Result<NetworkSpec, FileError> {
        let n = self.classes;
        let check = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(FileError::Shape(format!("{name} has {len} entries, expected {n}")))
            }
        };
        check("station_of", self.station_of.len())?;
        check("arrival_rates", self.arrival_rates.len())?;
        check("service_rates", self.service_rates.len())?;
        let flat: Vec<f64> = match &self.routing {
            Routing::Rows(rows) => {
                check("routing", rows.len())?;
                for row in rows {
                    check("routing row", row.len())?;
                }
                rows.concat()
            }
            Routing::Flat(v) => {
                if v.len() != n * n {
                    return Err(FileError::Shape(format!("routing has {} entries, expected {}", v.len(), n * n)));
                }
                v.clone()
            }
        };
        let station_of = self
            .station_of
            .iter()
            .map(|&s| {
                if s == 0 || s > self.stations {
                    Err(FileError::Shape(format!("station id {s} outside 1..={}", self.stations)))
                } else {
                    Ok(s - 1)
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let routing = Matrix::from_row_major(n, n, flat)?;
        Ok(NetworkSpec::new(
            self.stations,
            station_of,
            self.arrival_rates.clone(),
            self.service_rates.clone(),
            routing,
        )?)
    }
}

pub fn parse_network(text: &str) -> Result<NetworkSpec, FileError> {
    serde_json::from_str::<NetworkFile>(text)?.to_spec()
}

pub fn load_network(path: &Path) -> Result<NetworkSpec, FileError> {
    parse_network(&read(path)?)
}

pub fn network_json(spec: &NetworkSpec) -> String {
    serde_json::to_string_pretty(&NetworkFile::from_spec(spec)).expect("network serializes")
}

/// The two-station, three-buffer line used throughout the experiments:
/// buffers 1 and 3 at station 1, buffer 2 at station 2, `μ = (22, 10, 22)`.
pub fn two_station_three_buffer(lambda: f64) -> NetworkSpec {
    let mut r = Matrix::zeros(3, 3);
    r[(0, 1)] = 1.0;
    r[(1, 2)] = 1.0;
    NetworkSpec::new(2, vec![0, 1, 0], vec![lambda, 0.0, 0.0], vec![22.0, 10.0, 22.0], r)
        .expect("fixed network is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum PolicyFile {
    /// Station id to classes from highest to lowest priority.
    Priority { order: BTreeMap<String, Vec<usize>> },
}

impl PolicyFile {
    pub fn from_policy(policy: &PriorityPolicy) -> Self {
        let order = policy
            .order()
            .iter()
            .enumerate()
            .map(|(s, classes)| ((s + 1).to_string(), classes.iter().map(|c| c + 1).collect()))
            .collect();
        PolicyFile::Priority { order }
    }

    pub fn to_policy(&self, spec: &NetworkSpec) -> Result<PriorityPolicy, FileError> {
        let PolicyFile::Priority { order } = self;
        let mut stations = vec![Vec::new(); spec.num_stations()];
        for (key, classes) in order {
            let s: usize = key
                .trim()
                .parse()
                .map_err(|_| FileError::Shape(format!("station key {key:?} is not an integer")))?;
            if s == 0 || s > spec.num_stations() {
                return Err(FileError::Shape(format!("station id {s} outside 1..={}", spec.num_stations())));
            }
            stations[s - 1] = classes
                .iter()
                .map(|&c| {
                    if c == 0 || c > spec.num_classes() {
                        Err(FileError::Shape(format!("class id {c} outside 1..={}", spec.num_classes())))
                    } else {
                        Ok(c - 1)
                    }
                })
                .collect::<Result<_, _>>()?;
        }
        Ok(PriorityPolicy::new(spec, stations)?)
    }
}

/// `fbfs`, `lbfs`, inline policy JSON, or a path to a policy file.
pub fn resolve_policy(arg: &str, spec: &NetworkSpec) -> Result<PriorityPolicy, FileError> {
    match arg.trim().to_ascii_lowercase().as_str() {
        "fbfs" => return Ok(PriorityPolicy::fbfs(spec)),
        "lbfs" => return Ok(PriorityPolicy::lbfs(spec)),
        _ => {}
    }
    let text = if arg.trim_start().starts_with('{') {
        arg.to_string()
    } else {
        read(Path::new(arg))?
    };
    serde_json::from_str::<PolicyFile>(&text)?.to_policy(spec)
}

pub fn policy_json(policy: &PriorityPolicy) -> String {
    serde_json::to_string(&PolicyFile::from_policy(policy)).expect("policy serializes")
}

/// Comma-separated nonnegative integers, e.g. `"0,0,1"`.
pub fn parse_state(text: &str) -> Result<Vec<u32>, FileError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u32>()
                .map_err(|_| FileError::Shape(format!("{t:?} is not a nonnegative integer")))
        })
        .collect()
}

fn read(path: &Path) -> Result<String, FileError> {
    std::fs::read_to_string(path).map_err(|source| FileError::Io {
        path: path.display().to_string(),
        source,
    })
}
