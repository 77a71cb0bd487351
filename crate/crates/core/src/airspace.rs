//! Per-timestamp traffic snapshots to graphs: altitude-scaled pairwise
//! distances, thresholded inverse-distance adjacency, symmetric normalization
//! and per-aircraft node features.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numkit::Matrix;

/// Number of node features per aircraft.
pub const NUM_FEATURES: usize = 5;
/// Default edge threshold in nmi-equivalent scaled distance.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 40.0;
/// Separations are capped at this value before normalizing by it.
pub const SEPARATION_CAP: f64 = 100.0;
/// Maximum aircraft simultaneously under control.
pub const MAX_AIRCRAFT: usize = 23;
/// Altitude normalizer in feet.
pub const ALTITUDE_NORM: f64 = 30_000.0;
/// Edge weights are 1/max(distance, this floor).
pub const DISTANCE_FLOOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum AirspaceError {
    #[error("empty snapshot at t={0}: no aircraft to build a graph from")]
    EmptySnapshot(usize),
    #[error("timestamp mismatch: {0} vs {1}")]
    TimestampMismatch(usize, usize),
    #[error("duplicate callsign {callsign} at t={t}")]
    DuplicateCallsign { callsign: String, t: usize },
    #[error("aircraft {callsign} out of bounds: x={x} y={y} alt={alt}")]
    OutOfBounds { callsign: String, x: f64, y: f64, alt: f64 },
    #[error("traffic csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One aircraft at one timestamp. Positions are local-plane Cartesian in
/// nautical miles; altitude in feet.
#[derive(Debug, Clone, PartialEq)]
pub struct AircraftState {
    pub callsign: String,
    pub t: usize,
    pub x: f64,
    pub y: f64,
    pub altitude: f64,
}

impl AircraftState {
    pub fn validate(&self) -> Result<(), AirspaceError> {
        if self.altitude < 0.0 || self.x.abs() > 500.0 || self.y.abs() > 500.0 {
            return Err(AirspaceError::OutOfBounds {
                callsign: self.callsign.clone(),
                x: self.x,
                y: self.y,
                alt: self.altitude,
            });
        }
        Ok(())
    }
}

/// All aircraft present at one timestamp.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficSnapshot {
    pub t: usize,
    pub aircraft: Vec<AircraftState>,
}

impl TrafficSnapshot {
    pub fn validate(&self) -> Result<(), AirspaceError> {
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.aircraft {
            a.validate()?;
            if !seen.insert(a.callsign.as_str()) {
                return Err(AirspaceError::DuplicateCallsign {
                    callsign: a.callsign.clone(),
                    t: self.t,
                });
            }
        }
        Ok(())
    }
}

/// One timestamp's graph: adjacency, normalized adjacency and node features.
#[derive(Debug, Clone, PartialEq)]
pub struct AirspaceGraph {
    pub node_ids: Vec<String>,
    pub adjacency: Matrix,
    pub normalized: Matrix,
    pub features: Matrix,
}

impl AirspaceGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Single zero-feature node standing in for an empty snapshot so window
    /// shapes stay valid. Never produced by the simulator mid-trial.
    pub fn placeholder() -> AirspaceGraph {
        AirspaceGraph {
            node_ids: vec!["__empty__".to_string()],
            adjacency: Matrix::zeros(1, 1),
            normalized: Matrix::identity(1),
            features: Matrix::zeros(1, NUM_FEATURES),
        }
    }
}

/// Altitude-dependent scaling that equalizes horizontal and vertical
/// separation: 0.005 when both aircraft are at or below 29,000 ft,
/// 0.0025 when either is above.
pub fn scale_factor(alt_i: f64, alt_j: f64) -> f64 {
    debug_assert!(alt_i >= 0.0 && alt_j >= 0.0);
    if alt_i <= 29_000.0 && alt_j <= 29_000.0 {
        0.005
    } else {
        0.0025
    }
}

/// Combined separation sqrt(d^2 + s^2 h^2) in nmi-equivalent units, with d the
/// horizontal Euclidean distance (nmi) and h the altitude difference (ft).
pub fn scaled_distance(a: &AircraftState, b: &AircraftState) -> Result<f64, AirspaceError> {
    if a.t != b.t {
        return Err(AirspaceError::TimestampMismatch(a.t, b.t));
    }
    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let h = (a.altitude - b.altitude).abs();
    let s = scale_factor(a.altitude, b.altitude);
    Ok((d * d + s * s * h * h).sqrt())
}

fn horizontal_distance(a: &AircraftState, b: &AircraftState) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt()
}

/// Builds the thresholded inverse-distance graph for one snapshot.
pub fn build_graph(
    snapshot: &TrafficSnapshot,
    edge_threshold: f64,
) -> Result<AirspaceGraph, AirspaceError> {
    if snapshot.aircraft.is_empty() {
        return Err(AirspaceError::EmptySnapshot(snapshot.t));
    }
    snapshot.validate()?;
    let n = snapshot.aircraft.len();
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = scaled_distance(&snapshot.aircraft[i], &snapshot.aircraft[j])?;
            if d <= edge_threshold {
                let w = 1.0 / d.max(DISTANCE_FLOOR);
                adjacency.set(i, j, w);
                adjacency.set(j, i, w);
            }
        }
    }
    let normalized = normalize_adjacency(&adjacency);
    let features = node_features(snapshot)?;
    Ok(AirspaceGraph {
        node_ids: snapshot.aircraft.iter().map(|a| a.callsign.clone()).collect(),
        adjacency,
        normalized,
        features,
    })
}

/// D^{-1/2} (A + I) D^{-1/2} with D the degree matrix of A + I.
pub fn normalize_adjacency(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let mut degrees = vec![0.0; n];
    for i in 0..n {
        let mut d = 1.0; // self-loop
        for j in 0..n {
            d += adjacency.at(i, j);
        }
        degrees[i] = d.sqrt();
    }
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let a = adjacency.at(i, j) + if i == j { 1.0 } else { 0.0 };
            out.set(i, j, a / (degrees[i] * degrees[j]));
        }
    }
    out
}

/// Per-aircraft features:
/// [min scaled separation, min horizontal separation, min vertical separation,
///  density, altitude], each normalized to roughly unit scale.
pub fn node_features(snapshot: &TrafficSnapshot) -> Result<Matrix, AirspaceError> {
    if snapshot.aircraft.is_empty() {
        return Err(AirspaceError::EmptySnapshot(snapshot.t));
    }
    let n = snapshot.aircraft.len();
    let density = n as f64 / MAX_AIRCRAFT as f64;
    let mut features = Matrix::zeros(n, NUM_FEATURES);
    for i in 0..n {
        let a = &snapshot.aircraft[i];
        let mut min_scaled = f64::INFINITY;
        let mut min_h = f64::INFINITY;
        let mut min_v = f64::INFINITY;
        for (j, b) in snapshot.aircraft.iter().enumerate() {
            if i == j {
                continue;
            }
            min_scaled = min_scaled.min(scaled_distance(a, b)?);
            min_h = min_h.min(horizontal_distance(a, b));
            min_v = min_v.min((a.altitude - b.altitude).abs() / 1000.0);
        }
        // Singleton snapshots take the cap for every separation.
        let cap = |v: f64| v.min(SEPARATION_CAP) / SEPARATION_CAP;
        features.set(i, 0, cap(min_scaled));
        features.set(i, 1, cap(min_h));
        features.set(i, 2, cap(min_v));
        features.set(i, 3, density);
        features.set(i, 4, a.altitude / ALTITUDE_NORM);
    }
    Ok(features)
}

/// Converts latitude/longitude (degrees) to local-plane nmi around an origin.
pub fn equirectangular_nmi(lat: f64, lon: f64, origin_lat: f64, origin_lon: f64) -> (f64, f64) {
    const NMI_PER_DEG: f64 = 60.0;
    let x = (lon - origin_lon) * NMI_PER_DEG * origin_lat.to_radians().cos();
    let y = (lat - origin_lat) * NMI_PER_DEG;
    (x, y)
}

pub const TRAFFIC_CSV_HEADER: &str = "trial_id,t,callsign,x_nmi,y_nmi,alt_ft";

/// Writes one row per aircraft per timestamp.
pub fn write_traffic_csv<W: Write>(
    out: W,
    trial_id: &str,
    snapshots: &[TrafficSnapshot],
) -> Result<(), AirspaceError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRAFFIC_CSV_HEADER.split(','))
        .map_err(|e| AirspaceError::Csv { line: 0, message: e.to_string() })?;
    for snap in snapshots {
        for a in &snap.aircraft {
            w.write_record([
                trial_id,
                &snap.t.to_string(),
                &a.callsign,
                &format!("{}", a.x),
                &format!("{}", a.y),
                &format!("{}", a.altitude),
            ])
            .map_err(|e| AirspaceError::Csv { line: 0, message: e.to_string() })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a traffic CSV into per-timestamp snapshots covering 0..T, where T is
/// the largest timestamp seen plus one. Timestamps with no aircraft yield
/// empty snapshots.
pub fn read_traffic_csv<R: Read>(input: R) -> Result<(String, Vec<TrafficSnapshot>), AirspaceError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    {
        let headers = rdr
            .headers()
            .map_err(|e| AirspaceError::Csv { line: 1, message: e.to_string() })?;
        let expect: Vec<&str> = TRAFFIC_CSV_HEADER.split(',').collect();
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(AirspaceError::Csv {
                line: 1,
                message: format!("expected header `{TRAFFIC_CSV_HEADER}`"),
            });
        }
    }
    let mut trial_id = String::new();
    let mut rows: Vec<AircraftState> = Vec::new();
    let mut max_t = 0usize;
    for (idx, rec) in rdr.records().enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| AirspaceError::Csv { line, message: e.to_string() })?;
        if rec.len() != 6 {
            return Err(AirspaceError::Csv {
                line,
                message: format!("expected 6 fields, got {}", rec.len()),
            });
        }
        let parse_f = |i: usize, name: &str| -> Result<f64, AirspaceError> {
            rec[i].parse::<f64>().map_err(|_| AirspaceError::Csv {
                line,
                message: format!("invalid {name}: `{}`", &rec[i]),
            })
        };
        let t: usize = rec[1].parse().map_err(|_| AirspaceError::Csv {
            line,
            message: format!("invalid t: `{}`", &rec[1]),
        })?;
        if trial_id.is_empty() {
            trial_id = rec[0].to_string();
        }
        let state = AircraftState {
            callsign: rec[2].to_string(),
            t,
            x: parse_f(3, "x_nmi")?,
            y: parse_f(4, "y_nmi")?,
            altitude: parse_f(5, "alt_ft")?,
        };
        state.validate()?;
        max_t = max_t.max(t);
        rows.push(state);
    }
    let mut snapshots: Vec<TrafficSnapshot> = (0..=max_t)
        .map(|t| TrafficSnapshot { t, aircraft: Vec::new() })
        .collect();
    for a in rows {
        snapshots[a.t].aircraft.push(a);
    }
    for s in &snapshots {
        s.validate()?;
    }
    Ok((trial_id, snapshots))
}

pub fn read_traffic_csv_path(path: &Path) -> Result<(String, Vec<TrafficSnapshot>), AirspaceError> {
    let f = std::fs::File::open(path)?;
    read_traffic_csv(std::io::BufReader::new(f))
}
