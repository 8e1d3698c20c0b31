//! Aggregation-tree representation, validation, metrics, traversal order, and
//! exhaustive enumeration for the brute-force oracle.
//!
//! A topology is a parent array over the devices: `parent[i]` is the node
//! device `i` forwards to, with the server at index `device_count`. Storing
//! parents (rather than an assignment matrix) makes "exactly one target, never
//! self" hold by construction; validation only has to establish that the
//! server is reached by every device without revisiting a node.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Why a parent array is not a server-rooted tree.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyViolation {
    #[error("device {node} points at {parent}, outside 0..={max}")]
    OutOfRange { node: usize, parent: usize, max: usize },
    #[error("device {node} points at itself")]
    SelfLoop { node: usize },
    #[error("no device uploads directly to the server")]
    NoServerLink,
    #[error("cycle through devices {nodes:?}")]
    Cycle { nodes: Vec<usize> },
}

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("enumeration over {k} devices would visit {count} parent arrays; pass allow_large to override")]
    EnumerationGuard { k: usize, count: u128 },
}

/// Checks that `parents` describes a tree rooted at the server
/// (index `parents.len()`): in-range, self-loop free, at least one direct
/// server link, and every device reaches the server without revisiting.
pub fn validate(parents: &[usize]) -> Result<(), TopologyViolation> {
    let k = parents.len();
    for (node, &parent) in parents.iter().enumerate() {
        if parent > k {
            return Err(TopologyViolation::OutOfRange { node, parent, max: k });
        }
        if parent == node {
            return Err(TopologyViolation::SelfLoop { node });
        }
    }
    if !parents.iter().any(|&p| p == k) {
        return Err(TopologyViolation::NoServerLink);
    }
    // 0 = unvisited, 1 = on the current walk, 2 = known to reach the server.
    let mut state = vec![0u8; k];
    for start in 0..k {
        if state[start] != 0 {
            continue;
        }
        let mut walk = Vec::new();
        let mut node = start;
        loop {
            if node == k {
                for &v in &walk {
                    state[v] = 2;
                }
                break;
            }
            match state[node] {
                2 => {
                    for &v in &walk {
                        state[v] = 2;
                    }
                    break;
                }
                1 => {
                    // Re-entered the current walk: everything from the first
                    // occurrence of `node` onward is the cycle.
                    let pos = walk.iter().position(|&v| v == node).unwrap();
                    return Err(TopologyViolation::Cycle {
                        nodes: walk[pos..].to_vec(),
                    });
                }
                _ => {
                    state[node] = 1;
                    walk.push(node);
                    node = parents[node];
                }
            }
        }
    }
    Ok(())
}

/// A validated server-rooted aggregation tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Topology {
    parents: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Topology {
    type Error = TopologyViolation;

    fn try_from(parents: Vec<usize>) -> Result<Self, Self::Error> {
        Topology::new(parents)
    }
}

impl From<Topology> for Vec<usize> {
    fn from(t: Topology) -> Self {
        t.parents
    }
}

impl Topology {
    pub fn new(parents: Vec<usize>) -> Result<Self, TopologyViolation> {
        validate(&parents)?;
        Ok(Self { parents })
    }

    /// Every device uploads straight to the server.
    pub fn flat_star(k: usize) -> Self {
        Self { parents: vec![k; k] }
    }

    pub fn parents(&self) -> &[usize] {
        &self.parents
    }

    pub fn device_count(&self) -> usize {
        self.parents.len()
    }

    pub fn server(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, device: usize) -> usize {
        self.parents[device]
    }

    /// Devices that upload to `node` (a device or the server).
    pub fn children(&self, node: usize) -> Vec<usize> {
        (0..self.parents.len()).filter(|&i| self.parents[i] == node).collect()
    }

    /// Maximum number of incoming links over all nodes, server included.
    /// A flat star over K devices has degree K; a chain has degree 1.
    pub fn degree(&self) -> usize {
        let mut in_count = vec![0usize; self.parents.len() + 1];
        for &p in &self.parents {
            in_count[p] += 1;
        }
        in_count.into_iter().max().unwrap_or(0)
    }

    /// Devices ordered so that every device appears before its parent
    /// (leaves first). Deterministic: among ready devices the smallest index
    /// goes first.
    pub fn aggregation_order(&self) -> Vec<usize> {
        let k = self.parents.len();
        let mut pending_children = vec![0usize; k];
        for &p in &self.parents {
            if p < k {
                pending_children[p] += 1;
            }
        }
        let mut ready: Vec<usize> = (0..k).filter(|&i| pending_children[i] == 0).collect();
        ready.sort_unstable_by(|a, b| b.cmp(a)); // pop from the back = smallest
        let mut order = Vec::with_capacity(k);
        while let Some(node) = ready.pop() {
            order.push(node);
            let p = self.parents[node];
            if p < k {
                pending_children[p] -= 1;
                if pending_children[p] == 0 {
                    // keep the ready stack sorted descending
                    let pos = ready.partition_point(|&v| v > p);
                    ready.insert(pos, p);
                }
            }
        }
        debug_assert_eq!(order.len(), k);
        order
    }

    /// Graphviz rendering; node positions (meters) become `pos` attributes
    /// when supplied.
    pub fn to_dot(&self, positions: Option<&[[f64; 2]]>) -> String {
        let k = self.parents.len();
        let mut out = String::from("digraph aggregation {\n  rankdir=BT;\n");
        for node in 0..=k {
            let label = if node == k { "server".to_string() } else { format!("d{node}") };
            let shape = if node == k { "doublecircle" } else { "circle" };
            match positions.and_then(|p| p.get(node)) {
                Some(p) => out.push_str(&format!(
                    "  n{node} [label=\"{label}\", shape={shape}, pos=\"{:.1},{:.1}!\"];\n",
                    p[0], p[1]
                )),
                None => out.push_str(&format!("  n{node} [label=\"{label}\", shape={shape}];\n")),
            }
        }
        for (i, &p) in self.parents.iter().enumerate() {
            out.push_str(&format!("  n{i} -> n{p};\n"));
        }
        out.push_str("}\n");
        out
    }
}

/// Number of server-rooted trees over `k` devices: `(k + 1)^(k - 1)`.
pub fn tree_count(k: usize) -> u128 {
    (k as u128 + 1).pow(k.saturating_sub(1) as u32)
}

const ENUMERATION_GUARD: usize = 7;

/// Iterator over every valid topology for `k` devices, each yielded exactly
/// once in lexicographic parent-array order. Guarded at `k <= 7` (about
/// 2 * 10^5 trees) unless `allow_large` is set.
pub fn enumerate_all(k: usize, allow_large: bool) -> Result<EnumerateTopologies, TopologyError> {
    if k > ENUMERATION_GUARD && !allow_large {
        Err(TopologyError::EnumerationGuard {
            k,
            count: (k as u128 + 1).pow(k as u32),
        })
    } else {
        Ok(EnumerateTopologies {
            k,
            next: Some(vec![0; k]),
        })
    }
}

pub struct EnumerateTopologies {
    k: usize,
    /// Next candidate parent array (odometer over 0..=k per digit), or None
    /// when exhausted.
    next: Option<Vec<usize>>,
}

impl EnumerateTopologies {
    fn advance(&mut self) {
        let Some(current) = self.next.as_mut() else { return };
        for i in (0..self.k).rev() {
            if current[i] < self.k {
                current[i] += 1;
                return;
            }
            current[i] = 0;
        }
        self.next = None;
    }
}

impl Iterator for EnumerateTopologies {
    type Item = Topology;

    fn next(&mut self) -> Option<Topology> {
        while let Some(candidate) = self.next.clone() {
            self.advance();
            if validate(&candidate).is_ok() {
                return Some(Topology { parents: candidate });
            }
        }
        None
    }
}

/// Uniformly random server-rooted tree, via Pruefer-sequence decoding over
/// the `k + 1` labeled nodes.
pub fn random_topology<R: Rng>(k: usize, rng: &mut R) -> Topology {
    let n = k + 1;
    if k == 1 {
        return Topology { parents: vec![1] };
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &a in &seq {
        degree[a] += 1;
    }
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(n - 1);
    let mut leaves: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&v| degree[v] == 1)
        .map(std::cmp::Reverse)
        .collect();
    for &a in &seq {
        let std::cmp::Reverse(leaf) = leaves.pop().unwrap();
        edges.push((leaf, a));
        degree[a] -= 1;
        if degree[a] == 1 {
            leaves.push(std::cmp::Reverse(a));
        }
    }
    let std::cmp::Reverse(u) = leaves.pop().unwrap();
    let std::cmp::Reverse(v) = leaves.pop().unwrap();
    edges.push((u, v));

    // Orient every edge toward the server root.
    let mut adjacency = vec![Vec::new(); n];
    for &(a, b) in &edges {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    let mut parents = vec![usize::MAX; k];
    let mut stack = vec![k];
    let mut seen = vec![false; n];
    seen[k] = true;
    while let Some(node) = stack.pop() {
        for &next in &adjacency[node] {
            if !seen[next] {
                seen[next] = true;
                parents[next] = node;
                stack.push(next);
            }
        }
    }
    Topology { parents }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn accepts_chain_star_hybrid() {
        // Devices 1 and 2 feed device 0, which uploads to the server.
        assert!(validate(&[3, 0, 0]).is_ok());
    }

    #[test]
    fn rejects_two_cycle() {
        match validate(&[1, 0, 3]) {
            Err(TopologyViolation::Cycle { nodes }) => {
                let mut nodes = nodes;
                nodes.sort_unstable();
                assert_eq!(nodes, vec![0, 1]);
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn accepts_flat_star() {
        assert!(validate(&[5, 5, 5, 5, 5]).is_ok());
    }

    #[test]
    fn rejects_missing_server_link_and_bad_parent() {
        // No device uploads to the server at all.
        assert_eq!(validate(&[1, 0]), Err(TopologyViolation::NoServerLink));
        assert_eq!(validate(&[9, 0]).unwrap_err(), TopologyViolation::OutOfRange {
            node: 0,
            parent: 9,
            max: 2
        });
        assert_eq!(validate(&[0, 2]).unwrap_err(), TopologyViolation::SelfLoop { node: 0 });
    }

    #[test]
    fn degree_reference_values() {
        assert_eq!(Topology::flat_star(5).degree(), 5);
        // Two children max: server <- {0, 1}; 0 <- {2, 3}; 1 <- {4}.
        let t = Topology::new(vec![5, 5, 0, 0, 1]).unwrap();
        assert_eq!(t.degree(), 2);
        // Chain 0 -> 1 -> 2 -> server.
        let t = Topology::new(vec![1, 2, 3]).unwrap();
        assert_eq!(t.degree(), 1);
    }

    #[test]
    fn aggregation_order_chain() {
        let t = Topology::new(vec![1, 2, 3]).unwrap();
        assert_eq!(t.aggregation_order(), vec![0, 1, 2]);
    }

    #[test]
    fn aggregation_order_flat_star_is_valid_permutation() {
        let t = Topology::flat_star(4);
        let order = t.aggregation_order();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    /// Independent check: an ordering is a topological order iff each device
    /// appears before its parent.
    fn is_topological(order: &[usize], parents: &[usize]) -> bool {
        let mut pos = vec![0; parents.len()];
        for (idx, &node) in order.iter().enumerate() {
            pos[node] = idx;
        }
        parents
            .iter()
            .enumerate()
            .all(|(i, &p)| p >= parents.len() || pos[i] < pos[p])
    }

    #[test]
    fn aggregation_order_matches_kahn_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let t = random_topology(6, &mut rng);
            let order = t.aggregation_order();
            assert_eq!(order.len(), 6);
            assert!(is_topological(&order, t.parents()), "order {order:?} for {:?}", t.parents());
        }
    }

    #[test]
    fn enumerate_k1() {
        let all: Vec<_> = enumerate_all(1, false).unwrap().collect();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].parents(), &[1]);
    }

    #[test]
    fn enumerate_k2_lists_exactly_three() {
        let all: Vec<Vec<usize>> = enumerate_all(2, false).unwrap().map(|t| t.parents().to_vec()).collect();
        assert_eq!(all.len(), 3);
        assert!(all.contains(&vec![2, 2])); // both direct
        assert!(all.contains(&vec![1, 2])); // 0 -> 1 -> server
        assert!(all.contains(&vec![2, 0])); // 1 -> 0 -> server
    }

    #[test]
    fn enumerate_counts_match_closed_form() {
        for k in 1..=6 {
            let n = enumerate_all(k, false).unwrap().count();
            assert_eq!(n as u128, tree_count(k), "k = {k}");
        }
    }

    #[test]
    fn enumerate_is_duplicate_free_and_valid() {
        let mut seen = std::collections::HashSet::new();
        for t in enumerate_all(4, false).unwrap() {
            assert!(validate(t.parents()).is_ok());
            assert!(seen.insert(t.parents().to_vec()));
        }
        assert_eq!(seen.len() as u128, tree_count(4));
    }

    #[test]
    fn guard_refuses_large_k() {
        assert!(enumerate_all(8, false).is_err());
        assert!(enumerate_all(8, true).is_ok());
    }

    #[test]
    fn random_topologies_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 2, 5, 10] {
            for _ in 0..100 {
                let t = random_topology(k, &mut rng);
                assert!(validate(t.parents()).is_ok());
            }
        }
    }

    #[test]
    fn serializes_as_bare_array() {
        let t = Topology::new(vec![2, 2]).unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), "[2,2]");
        let back: Topology = serde_json::from_str("[2,2]").unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Topology>("[1,0]").is_err());
    }

    #[test]
    fn dot_export_mentions_every_edge() {
        let t = Topology::new(vec![5, 5, 0, 0, 1]).unwrap();
        let dot = t.to_dot(None);
        for (i, p) in t.parents().iter().enumerate() {
            assert!(dot.contains(&format!("n{i} -> n{p};")));
        }
    }
}
