//! Euclidean TSP instances: TSPLIB-subset parsing and serialization,
//! synthetic generators, and pairwise distances.
//!
//! Only the subset of TSPLIB needed here is supported: `EUC_2D` weights and a
//! `NODE_COORD_SECTION`. Anything else is rejected with an error naming the
//! offending line. Distances are exact floating-point Euclidean values; the
//! classic TSPLIB integer rounding is deliberately not applied, because the
//! feature and graph computations operate on continuous distances and rounding
//! would perturb tie-breaking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Error;
use crate::Result;

/// One Euclidean TSP instance: an id plus an ordered list of node coordinates.
///
/// Invariants: at least 3 nodes, all coordinates finite, node order stable.
/// Values are immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    id: String,
    nodes: Vec<(f64, f64)>,
}

impl Instance {
    /// Builds an instance, validating the node-count and finiteness invariants.
    pub fn new(id: impl Into<String>, nodes: Vec<(f64, f64)>) -> Result<Self> {
        if nodes.len() < 3 {
            return Err(Error::invalid(format!(
                "instance needs at least 3 nodes, got {}",
                nodes.len()
            )));
        }
        if let Some((i, _)) = nodes
            .iter()
            .enumerate()
            .find(|(_, (x, y))| !x.is_finite() || !y.is_finite())
        {
            return Err(Error::invalid(format!("node {i} has a non-finite coordinate")));
        }
        Ok(Self { id: id.into(), nodes })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn nodes(&self) -> &[(f64, f64)] {
        &self.nodes
    }

    /// Number of nodes.
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Euclidean distance between nodes `i` and `j`.
    pub fn distance(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.n();
        for index in [i, j] {
            if index >= n {
                return Err(Error::IndexOutOfRange { index, n });
            }
        }
        Ok(self.distance_unchecked(i, j))
    }

    /// Distance without the index check; callers guarantee `i, j < n`.
    #[inline]
    pub(crate) fn distance_unchecked(&self, i: usize, j: usize) -> f64 {
        let (xi, yi) = self.nodes[i];
        let (xj, yj) = self.nodes[j];
        ((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt()
    }
}

/// Parses the TSPLIB subset (EUC_2D, NODE_COORD_SECTION).
///
/// The instance id comes from the NAME field, falling back to `fallback_id`
/// (normally the file name) when NAME is absent.
pub fn parse_tsplib(text: &str, fallback_id: Option<&str>) -> Result<Instance> {
    let mut name: Option<String> = None;
    let mut dimension: Option<usize> = None;
    let mut weight_type_seen = false;

    let mut lines = text.lines().enumerate().peekable();

    // Header: "KEY : VALUE" pairs until NODE_COORD_SECTION.
    let section_line = loop {
        let Some((idx, raw)) = lines.next() else {
            return Err(Error::MalformedHeader {
                line: text.lines().count(),
                reason: "missing NODE_COORD_SECTION".into(),
            });
        };
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = match line.split_once(':') {
            Some((k, v)) => (k.trim(), v.trim()),
            None => (line, ""),
        };
        match key {
            "NAME" => name = Some(value.to_string()),
            "COMMENT" => {}
            "TYPE" => {
                if value != "TSP" {
                    return Err(Error::MalformedHeader {
                        line: line_no,
                        reason: format!("unsupported TYPE `{value}`"),
                    });
                }
            }
            "DIMENSION" => {
                let n: usize = value.parse().map_err(|_| Error::MalformedHeader {
                    line: line_no,
                    reason: format!("unparsable DIMENSION `{value}`"),
                })?;
                if n < 3 {
                    return Err(Error::MalformedHeader {
                        line: line_no,
                        reason: format!("DIMENSION must be at least 3, got {n}"),
                    });
                }
                dimension = Some(n);
            }
            "EDGE_WEIGHT_TYPE" => {
                if value != "EUC_2D" {
                    return Err(Error::UnsupportedWeightType {
                        line: line_no,
                        found: value.to_string(),
                    });
                }
                weight_type_seen = true;
            }
            "NODE_COORD_SECTION" => break line_no,
            other => {
                return Err(Error::MalformedHeader {
                    line: line_no,
                    reason: format!("unsupported keyword `{other}`"),
                });
            }
        }
    };

    let Some(n) = dimension else {
        return Err(Error::MalformedHeader {
            line: section_line,
            reason: "missing DIMENSION".into(),
        });
    };
    if !weight_type_seen {
        return Err(Error::MalformedHeader {
            line: section_line,
            reason: "missing EDGE_WEIGHT_TYPE".into(),
        });
    }

    let mut nodes = Vec::with_capacity(n);
    let mut last_line = section_line;
    while nodes.len() < n {
        let Some((idx, raw)) = lines.next() else {
            return Err(Error::CoordCountMismatch {
                line: last_line,
                declared: n,
                found: nodes.len(),
            });
        };
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line == "EOF" {
            return Err(Error::CoordCountMismatch {
                line: line_no,
                declared: n,
                found: nodes.len(),
            });
        }
        last_line = line_no;
        let mut parts = line.split_whitespace();
        let index: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|_| Error::BadCoordinate {
                line: line_no,
                reason: "node index is not an integer".into(),
            })?;
        if index != nodes.len() + 1 {
            return Err(Error::BadCoordinate {
                line: line_no,
                reason: format!("expected node index {}, got {index}", nodes.len() + 1),
            });
        }
        let mut coord = |axis: &str| -> Result<f64> {
            let field = parts.next().ok_or_else(|| Error::BadCoordinate {
                line: line_no,
                reason: format!("missing {axis} coordinate"),
            })?;
            let v: f64 = field.parse().map_err(|_| Error::BadCoordinate {
                line: line_no,
                reason: format!("unparsable {axis} coordinate `{field}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::BadCoordinate {
                    line: line_no,
                    reason: format!("non-finite {axis} coordinate `{field}`"),
                });
            }
            Ok(v)
        };
        let x = coord("x")?;
        let y = coord("y")?;
        if parts.next().is_some() {
            return Err(Error::BadCoordinate {
                line: line_no,
                reason: "trailing fields after coordinates".into(),
            });
        }
        nodes.push((x, y));
    }

    // Only blank lines and an optional EOF marker may follow.
    let mut extra = 0usize;
    for (idx, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line == "EOF" {
            continue;
        }
        if line
            .split_whitespace()
            .next()
            .is_some_and(|f| f.parse::<usize>().is_ok())
        {
            extra += 1;
            last_line = idx + 1;
        } else {
            return Err(Error::MalformedHeader {
                line: idx + 1,
                reason: format!("unexpected content after coordinates: `{line}`"),
            });
        }
    }
    if extra > 0 {
        return Err(Error::CoordCountMismatch {
            line: last_line,
            declared: n,
            found: n + extra,
        });
    }

    let id = match name {
        Some(name) if !name.is_empty() => name,
        _ => fallback_id
            .map(str::to_string)
            .ok_or_else(|| Error::MalformedHeader {
                line: 1,
                reason: "missing NAME and no fallback id supplied".into(),
            })?,
    };
    Instance::new(id, nodes)
}

/// Serializes an instance in the same TSPLIB subset accepted by
/// [`parse_tsplib`]. Coordinates are written in shortest round-trip form, so
/// parse(serialize(inst)) reproduces the coordinate list exactly.
pub fn serialize_tsplib(inst: &Instance) -> String {
    let mut out = String::new();
    out.push_str(&format!("NAME : {}\n", inst.id()));
    out.push_str("TYPE : TSP\n");
    out.push_str(&format!("DIMENSION : {}\n", inst.n()));
    out.push_str("EDGE_WEIGHT_TYPE : EUC_2D\n");
    out.push_str("NODE_COORD_SECTION\n");
    for (i, (x, y)) in inst.nodes().iter().enumerate() {
        out.push_str(&format!("{} {} {}\n", i + 1, x, y));
    }
    out.push_str("EOF\n");
    out
}

/// Random uniform Euclidean instance: `n` points i.i.d. uniform on the unit
/// square. Deterministic for a fixed seed.
pub fn generate_rue(n: usize, seed: u64) -> Result<Instance> {
    if n < 3 {
        return Err(Error::invalid(format!("generate_rue needs n >= 3, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = (0..n)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    Instance::new(format!("rue_n{n}_s{seed}"), nodes)
}

/// Clustered instance: `k_clusters` centers uniform on the unit square, points
/// assigned round-robin with Gaussian offsets of standard deviation `spread`,
/// clipped to the unit square. Deterministic for a fixed seed.
pub fn generate_clustered(n: usize, k_clusters: usize, spread: f64, seed: u64) -> Result<Instance> {
    if n < 3 {
        return Err(Error::invalid(format!(
            "generate_clustered needs n >= 3, got {n}"
        )));
    }
    if k_clusters < 1 || k_clusters > n {
        return Err(Error::invalid(format!(
            "generate_clustered needs n >= k_clusters >= 1, got n={n}, k_clusters={k_clusters}"
        )));
    }
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::invalid(format!(
            "generate_clustered needs spread > 0, got {spread}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(f64, f64)> = (0..k_clusters)
        .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
        .collect();
    let normal = Normal::new(0.0, spread).expect("spread validated above");
    let nodes = (0..n)
        .map(|i| {
            let (cx, cy) = centers[i % k_clusters];
            let x = (cx + normal.sample(&mut rng)).clamp(0.0, 1.0);
            let y = (cy + normal.sample(&mut rng)).clamp(0.0, 1.0);
            (x, y)
        })
        .collect();
    Instance::new(
        format!("clustered_n{n}_k{k_clusters}_p{spread}_s{seed}"),
        nodes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const THREE_NODE: &str = "NAME : toy3\nTYPE : TSP\nDIMENSION : 3\nEDGE_WEIGHT_TYPE : EUC_2D\nNODE_COORD_SECTION\n1 0.0 0.0\n2 3.0 0.0\n3 0.0 4.0\nEOF\n";

    #[test]
    fn parse_three_node_file() {
        let inst = parse_tsplib(THREE_NODE, None).unwrap();
        assert_eq!(inst.id(), "toy3");
        assert_eq!(inst.n(), 3);
        assert_eq!(inst.nodes(), &[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let text = THREE_NODE.replace("DIMENSION : 3", "DIMENSION : 4");
        match parse_tsplib(&text, None) {
            Err(Error::CoordCountMismatch {
                declared, found, line,
            }) => {
                assert_eq!((declared, found), (4, 3));
                assert!(line > 0);
            }
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn extra_coordinate_lines_are_a_mismatch() {
        let text = THREE_NODE.replace("EOF\n", "4 1.0 1.0\nEOF\n");
        match parse_tsplib(&text, None) {
            Err(Error::CoordCountMismatch { declared, found, .. }) => {
                assert_eq!((declared, found), (3, 4));
            }
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn explicit_weight_type_is_rejected() {
        let text = THREE_NODE.replace("EUC_2D", "EXPLICIT");
        match parse_tsplib(&text, None) {
            Err(Error::UnsupportedWeightType { found, line }) => {
                assert_eq!(found, "EXPLICIT");
                assert_eq!(line, 4);
            }
            other => panic!("expected unsupported weight type, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_coordinate_is_rejected() {
        let text = THREE_NODE.replace("2 3.0 0.0", "2 inf 0.0");
        match parse_tsplib(&text, None) {
            Err(Error::BadCoordinate { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected bad coordinate, got {other:?}"),
        }
    }

    #[test]
    fn name_falls_back_to_supplied_id() {
        let text = THREE_NODE.replace("NAME : toy3\n", "");
        let inst = parse_tsplib(&text, Some("from_file")).unwrap();
        assert_eq!(inst.id(), "from_file");
        assert!(parse_tsplib(&text, None).is_err());
    }

    #[test]
    fn distance_examples() {
        let inst = Instance::new("d", vec![(0.0, 0.0), (3.0, 4.0), (1.0, 0.0)]).unwrap();
        assert_eq!(inst.distance(0, 1).unwrap(), 5.0);
        assert_eq!(inst.distance(1, 0).unwrap(), 5.0);
        assert_eq!(inst.distance(1, 1).unwrap(), 0.0);
        let tri = Instance::new("t", vec![(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert_eq!(tri.distance(1, 2).unwrap(), 2f64.sqrt());
        assert!(matches!(
            inst.distance(0, 3),
            Err(Error::IndexOutOfRange { index: 3, n: 3 })
        ));
    }

    #[test]
    fn rue_is_in_unit_square_and_deterministic() {
        let a = generate_rue(100, 1).unwrap();
        assert!(a
            .nodes()
            .iter()
            .all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
        let b = generate_rue(100, 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_rue(100, 2).unwrap());
        assert!(generate_rue(2, 1).is_err());
    }

    #[test]
    fn rue_mean_matches_uniform_law() {
        // Law-of-large-numbers check at n=1000; the +-0.05 bound is ~5 sigma.
        let inst = generate_rue(1000, 7).unwrap();
        let mean_x: f64 = inst.nodes().iter().map(|&(x, _)| x).sum::<f64>() / 1000.0;
        assert!((mean_x - 0.5).abs() < 0.05, "mean_x = {mean_x}");
    }

    #[test]
    fn clustered_degenerate_limit_collapses() {
        let inst = generate_clustered(50, 1, 1e-12, 9).unwrap();
        let (x0, y0) = inst.nodes()[0];
        assert!(inst
            .nodes()
            .iter()
            .all(|&(x, y)| (x - x0).abs() < 1e-9 && (y - y0).abs() < 1e-9));
    }

    #[test]
    fn clustered_is_deterministic_and_validates() {
        let a = generate_clustered(20, 4, 0.05, 3).unwrap();
        let b = generate_clustered(20, 4, 0.05, 3).unwrap();
        assert_eq!(a, b);
        assert!(generate_clustered(3, 4, 0.05, 3).is_err());
        assert!(generate_clustered(10, 0, 0.05, 3).is_err());
        assert!(generate_clustered(10, 2, 0.0, 3).is_err());
    }

    #[test]
    fn roundtrip_preserves_nodes_exactly() {
        let inst = generate_rue(37, 5).unwrap();
        let text = serialize_tsplib(&inst);
        let back = parse_tsplib(&text, None).unwrap();
        assert_eq!(inst, back);
    }
}
