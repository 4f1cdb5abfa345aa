//! Frame scene graphs and their symmetric-normalized adjacency.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Interaction, ObjectClass, RelationClass};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Detected,
    Tracked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GraphNode {
    pub id: usize,
    pub class: ObjectClass,
    pub provenance: Provenance,
}

/// Which node pairs receive an edge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Every instrument is linked to the tissue node and nothing else.
    #[default]
    Star,
    /// All pairs are linked.
    Complete,
}

impl FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "star" => Ok(Topology::Star),
            "complete" => Ok(Topology::Complete),
            other => Err(Error::Unknown {
                kind: "topology",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Topology::Star => "star",
            Topology::Complete => "complete",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraph {
    nodes: Vec<GraphNode>,
    edges: BTreeSet<(usize, usize)>,
    relations: Vec<(usize, RelationClass, usize)>,
}

impl SceneGraph {
    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Unordered edges as `(low, high)` pairs.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Relation annotations `(subject node, relation, object node)`.
    pub fn relations(&self) -> &[(usize, RelationClass, usize)] {
        &self.relations
    }

    /// A graph with an explicit edge set, for property testing.
    pub fn with_edges(nodes: Vec<GraphNode>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = nodes.len();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b || a >= n || b >= n {
                return Err(Error::Invalid(format!("bad edge ({a}, {b}) for {n} nodes")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            nodes,
            edges: set,
            relations: Vec::new(),
        })
    }
}

/// Builds the graph for one frame's node set.
///
/// Node ids must be exactly `0..n`; at most one node may be tissue.
/// Interactions whose endpoints are both present become relation
/// annotations and never change the edge set.
pub fn build_scene_graph(
    nodes: &[GraphNode],
    topology: Topology,
    interactions: Option<&[Interaction]>,
) -> Result<SceneGraph> {
    if nodes.is_empty() {
        return Err(Error::Invalid("scene graph needs at least one node".into()));
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_by_key(|n| n.id);
    for pair in sorted.windows(2) {
        if pair[0].id == pair[1].id {
            return Err(Error::Invalid(format!("duplicate node id {}", pair[0].id)));
        }
    }
    if sorted.iter().enumerate().any(|(i, n)| n.id != i) {
        return Err(Error::Invalid("node ids must be contiguous from 0".into()));
    }
    let tissue: Vec<usize> = sorted.iter().filter(|n| n.class.is_tissue()).map(|n| n.id).collect();
    if tissue.len() > 1 {
        return Err(Error::Invalid(format!("{} tissue nodes in one graph", tissue.len())));
    }

    let n = sorted.len();
    let mut edges = BTreeSet::new();
    match topology {
        Topology::Star => {
            if let Some(&t) = tissue.first() {
                for node in &sorted {
                    if node.id != t {
                        edges.insert((t.min(node.id), t.max(node.id)));
                    }
                }
            }
        }
        Topology::Complete => {
            for a in 0..n {
                for b in a + 1..n {
                    edges.insert((a, b));
                }
            }
        }
    }

    let node_of = |class: ObjectClass| sorted.iter().find(|n| n.class == class).map(|n| n.id);
    let relations = interactions
        .unwrap_or(&[])
        .iter()
        .filter_map(|i| Some((node_of(i.subject)?, i.relation, node_of(i.object)?)))
        .collect();

    Ok(SceneGraph {
        nodes: sorted,
        edges,
        relations,
    })
}

/// `D^-1/2 (A + I) D^-1/2` together with its intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    /// Adjacency with self-connections.
    pub with_self_loops: Matrix,
    /// Row sums of `with_self_loops`.
    pub degree: Vec<f64>,
    pub normalized: Matrix,
}

pub fn normalized_adjacency(graph: &SceneGraph) -> Result<NormalizedAdjacency> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::Invalid("adjacency of an empty graph".into()));
    }
    let mut a = Matrix::identity(n);
    for &(i, j) in graph.edges() {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    let degree: Vec<f64> = (0..n).map(|i| a.row(i).iter().sum()).collect();
    let mut norm = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                // single rounding, and symmetric by construction
                norm.set(i, j, v / (degree[i] * degree[j]).sqrt());
            }
        }
    }
    Ok(NormalizedAdjacency {
        with_self_loops: a,
        degree,
        normalized: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ObjectClass::*;

    fn nodes(classes: &[ObjectClass]) -> Vec<GraphNode> {
        classes
            .iter()
            .enumerate()
            .map(|(id, &class)| GraphNode {
                id,
                class,
                provenance: Provenance::Detected,
            })
            .collect()
    }

    #[test]
    fn star_and_complete_topologies() {
        let g = build_scene_graph(&nodes(&[Kidney, BipolarForceps, Suction]), Topology::Star, None).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (0, 2)]);

        let g = build_scene_graph(&nodes(&[BipolarForceps]), Topology::Star, None).unwrap();
        assert_eq!((g.len(), g.edges().len()), (1, 0));

        let g = build_scene_graph(&nodes(&[Suction, BipolarForceps]), Topology::Star, None).unwrap();
        assert!(g.edges().is_empty());

        let g = build_scene_graph(
            &nodes(&[Kidney, BipolarForceps, Suction, Stapler]),
            Topology::Complete,
            None,
        )
        .unwrap();
        assert_eq!(g.edges().len(), 6);
    }

    #[test]
    fn star_centers_on_tissue_anywhere_in_order() {
        let g = build_scene_graph(&nodes(&[Suction, Kidney, Stapler]), Topology::Star, None).unwrap();
        assert_eq!(g.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn construction_errors() {
        assert!(build_scene_graph(&nodes(&[Kidney, Kidney]), Topology::Star, None).is_err());
        let mut dup = nodes(&[Kidney, Suction]);
        dup[1].id = 0;
        assert!(build_scene_graph(&dup, Topology::Star, None).is_err());
        assert!(build_scene_graph(&[], Topology::Star, None).is_err());
    }

    #[test]
    fn interactions_annotate_without_changing_topology() {
        let ns = nodes(&[Kidney, PrograspForceps, Suction]);
        let inter = [Interaction {
            subject: PrograspForceps,
            relation: RelationClass::Grasping,
            object: Kidney,
        }];
        let plain = build_scene_graph(&ns, Topology::Star, None).unwrap();
        let annotated = build_scene_graph(&ns, Topology::Star, Some(&inter)).unwrap();
        assert_eq!(plain.edges(), annotated.edges());
        assert_eq!(annotated.relations(), &[(1, RelationClass::Grasping, 0)]);
    }

    #[test]
    fn adjacency_examples() {
        let single = build_scene_graph(&nodes(&[Kidney]), Topology::Star, None).unwrap();
        assert_eq!(normalized_adjacency(&single).unwrap().normalized, Matrix::from_rows(&[[1.0]]));

        let pair = build_scene_graph(&nodes(&[Kidney, Suction]), Topology::Star, None).unwrap();
        let a = normalized_adjacency(&pair).unwrap();
        assert_eq!(a.normalized, Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));

        let star = build_scene_graph(&nodes(&[Kidney, BipolarForceps, Suction]), Topology::Star, None).unwrap();
        let a = normalized_adjacency(&star).unwrap();
        assert_eq!(a.degree, vec![3.0, 2.0, 2.0]);
        let m = &a.normalized;
        let s6 = 1.0 / 6f64.sqrt();
        let expect = [[1.0 / 3.0, s6, s6], [s6, 0.5, 0.0], [s6, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((m.get(i, j) - expect[i][j]).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn complete_graph_is_uniform() {
        for n in 1..=9 {
            let classes: Vec<ObjectClass> = ObjectClass::ALL[..n].to_vec();
            let g = build_scene_graph(&nodes(&classes), Topology::Complete, None).unwrap();
            let a = normalized_adjacency(&g).unwrap();
            for v in a.normalized.as_slice() {
                assert!((v - 1.0 / n as f64).abs() < 1e-15);
            }
        }
    }
}
