//! Pointed DAGs: validation, graded canonicalization and trajectory enumeration.
//!
//! States are dense integers `0..n`. A [`DagSpec`] is the raw serializable
//! description; a [`PointedDag`] is a validated graph with adjacency lists and
//! a topological order. Children and parents are kept in edge-insertion order,
//! which fixes the action ordering used by tabular policies.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{DagError, Error, Result};

pub type StateId = usize;

/// Default cap on the number of complete trajectories an oracle may enumerate.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// JSON document describing a pointed DAG.
///
/// `rewards`, when present, is aligned with `terminating`. `dummies` lists
/// `[dummy, from, to]` triples recording which original edge a dummy state
/// (inserted by [`PointedDag::to_graded`]) subdivides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DagSpec {
    pub states: Vec<StateId>,
    pub edges: Vec<[StateId; 2]>,
    pub initial: StateId,
    pub terminating: Vec<StateId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dummies: Vec<[StateId; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rewards: Option<Vec<f64>>,
}

impl DagSpec {
    pub fn new(
        n: usize,
        edges: &[(StateId, StateId)],
        initial: StateId,
        terminating: &[StateId],
    ) -> Self {
        Self {
            states: (0..n).collect(),
            edges: edges.iter().map(|&(a, b)| [a, b]).collect(),
            initial,
            terminating: terminating.to_vec(),
            layer_index: None,
            dummies: Vec::new(),
            rewards: None,
        }
    }
}

/// Checks every pointed-DAG invariant, returning the first violation.
pub fn validate_pointed_dag(spec: &DagSpec) -> Result<(), DagError> {
    PointedDag::from_spec(spec).map(|_| ())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointedDag {
    n: usize,
    edges: Vec<(StateId, StateId)>,
    initial: StateId,
    terminating: Vec<StateId>,
    layer_index: Option<Vec<usize>>,
    dummies: BTreeMap<StateId, (StateId, StateId)>,
    children: Vec<Vec<StateId>>,
    parents: Vec<Vec<StateId>>,
    is_terminating: Vec<bool>,
    topo: Vec<StateId>,
}

impl PointedDag {
    pub fn new(
        n: usize,
        edges: &[(StateId, StateId)],
        initial: StateId,
        terminating: &[StateId],
    ) -> Result<Self, DagError> {
        Self::from_spec(&DagSpec::new(n, edges, initial, terminating))
    }

    pub fn from_spec(spec: &DagSpec) -> Result<Self, DagError> {
        let n = spec.states.len();
        if n == 0 {
            return Err(DagError::Empty);
        }
        let mut seen = vec![false; n];
        for &s in &spec.states {
            if s >= n || seen[s] {
                return Err(DagError::NonDenseStates {
                    expected: n,
                    found: s,
                });
            }
            seen[s] = true;
        }
        if spec.initial >= n {
            return Err(DagError::UnknownInitial(spec.initial));
        }
        let mut children = vec![Vec::new(); n];
        let mut parents = vec![Vec::new(); n];
        let mut edge_set = HashSet::with_capacity(spec.edges.len());
        for &[a, b] in &spec.edges {
            if a >= n || b >= n {
                return Err(DagError::UnknownState(a, b));
            }
            if a == b {
                return Err(DagError::Cycle(a));
            }
            if !edge_set.insert((a, b)) {
                return Err(DagError::DuplicateEdge(a, b));
            }
            children[a].push(b);
            parents[b].push(a);
        }

        // Kahn's algorithm; leftovers lie on or downstream of a cycle.
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut stack: Vec<StateId> = (0..n).rev().filter(|&s| indeg[s] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(s) = stack.pop() {
            topo.push(s);
            for &c in children[s].iter().rev() {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    stack.push(c);
                }
            }
        }
        if topo.len() < n {
            let on_cycle = find_cycle_state(&children, &indeg);
            return Err(DagError::Cycle(on_cycle));
        }

        let sources: Vec<StateId> = (0..n).filter(|&s| parents[s].is_empty()).collect();
        if sources.len() > 1 {
            return Err(DagError::MultipleSources(sources));
        }
        if sources[0] != spec.initial {
            return Err(DagError::InitialNotSource {
                initial: spec.initial,
                source_state: sources[0],
            });
        }

        let mut is_terminating = vec![false; n];
        for &x in &spec.terminating {
            if x >= n {
                return Err(DagError::UnknownState(x, x));
            }
            is_terminating[x] = true;
        }
        for s in 0..n {
            if is_terminating[s] && !children[s].is_empty() {
                return Err(DagError::TerminatingHasChild(s));
            }
            if !is_terminating[s] && children[s].is_empty() {
                return Err(DagError::SinkNotTerminating(s));
            }
        }

        let mut reached = vec![false; n];
        reached[spec.initial] = true;
        for &s in &topo {
            if reached[s] {
                for &c in &children[s] {
                    reached[c] = true;
                }
            }
        }
        if let Some(s) = (0..n).find(|&s| !reached[s]) {
            return Err(DagError::Unreachable(s));
        }

        if let Some(layers) = &spec.layer_index {
            check_layering(layers, &spec.edges, spec.initial, &is_terminating)?;
        }

        let mut dummies = BTreeMap::new();
        for &[d, a, b] in &spec.dummies {
            if d >= n || a >= n || b >= n {
                return Err(DagError::UnknownState(a, b));
            }
            dummies.insert(d, (a, b));
        }

        Ok(Self {
            n,
            edges: spec.edges.iter().map(|&[a, b]| (a, b)).collect(),
            initial: spec.initial,
            terminating: spec.terminating.clone(),
            layer_index: spec.layer_index.clone(),
            dummies,
            children,
            parents,
            is_terminating,
            topo,
        })
    }

    pub fn to_spec(&self) -> DagSpec {
        DagSpec {
            states: (0..self.n).collect(),
            edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(),
            initial: self.initial,
            terminating: self.terminating.clone(),
            layer_index: self.layer_index.clone(),
            dummies: self.dummies.iter().map(|(&d, &(a, b))| [d, a, b]).collect(),
            rewards: None,
        }
    }

    pub fn num_states(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(StateId, StateId)] {
        &self.edges
    }

    pub fn initial(&self) -> StateId {
        self.initial
    }

    /// Terminating states in the order they were declared.
    pub fn terminating(&self) -> &[StateId] {
        &self.terminating
    }

    /// Terminating states in ascending id order.
    pub fn terminating_sorted(&self) -> Vec<StateId> {
        (0..self.n).filter(|&s| self.is_terminating[s]).collect()
    }

    pub fn is_terminating(&self, s: StateId) -> bool {
        self.is_terminating[s]
    }

    pub fn children(&self, s: StateId) -> &[StateId] {
        &self.children[s]
    }

    pub fn parents(&self, s: StateId) -> &[StateId] {
        &self.parents[s]
    }

    pub fn topological_order(&self) -> &[StateId] {
        &self.topo
    }

    pub fn layer_index(&self) -> Option<&[usize]> {
        self.layer_index.as_deref()
    }

    pub fn is_graded(&self) -> bool {
        self.layer_index.is_some()
    }

    pub fn is_dummy(&self, s: StateId) -> bool {
        self.dummies.contains_key(&s)
    }

    /// The original edge a dummy state subdivides.
    pub fn dummy_origin(&self, s: StateId) -> Option<(StateId, StateId)> {
        self.dummies.get(&s).copied()
    }

    /// States grouped by layer, ascending ids within a layer.
    pub fn layers(&self) -> Result<Vec<Vec<StateId>>> {
        let idx = self.layer_index.as_ref().ok_or(Error::NotGraded)?;
        let depth = idx.iter().copied().max().unwrap_or(0);
        let mut layers = vec![Vec::new(); depth + 1];
        for (s, &l) in idx.iter().enumerate() {
            layers[l].push(s);
        }
        Ok(layers)
    }

    /// Index of the terminal layer of a graded DAG.
    pub fn depth(&self) -> Result<usize> {
        let idx = self.layer_index.as_ref().ok_or(Error::NotGraded)?;
        Ok(idx.iter().copied().max().unwrap_or(0))
    }

    /// Position of `child` among the children of `s`.
    pub fn child_position(&self, s: StateId, child: StateId) -> Result<usize> {
        self.children[s]
            .iter()
            .position(|&c| c == child)
            .ok_or(Error::NotAnEdge(s, child))
    }

    /// Position of `parent` among the parents of `s`.
    pub fn parent_position(&self, s: StateId, parent: StateId) -> Result<usize> {
        self.parents[s]
            .iter()
            .position(|&p| p == parent)
            .ok_or(Error::NotAnEdge(parent, s))
    }

    /// Length of the longest path from the initial state to each state.
    pub fn longest_path_lengths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.n];
        for &s in &self.topo {
            for &c in &self.children[s] {
                depth[c] = depth[c].max(depth[s] + 1);
            }
        }
        depth
    }

    /// Canonical graded DAG: every edge `s -> t` becomes a chain of
    /// `l(t) - l(s)` edges through fresh dummy states, where `l` is the longest
    /// path length from the initial state and terminating states are pinned to
    /// the maximal depth. Original states keep their ids; dummies are appended.
    pub fn to_graded(&self) -> PointedDag {
        let depth = self.longest_path_lengths();
        let max_depth = depth.iter().copied().max().unwrap_or(0);
        let level = |s: StateId| {
            if self.is_terminating[s] {
                max_depth
            } else {
                depth[s]
            }
        };

        let mut next = self.n;
        let mut edges = Vec::with_capacity(self.edges.len());
        let mut layer_index: Vec<usize> = (0..self.n).map(level).collect();
        let mut dummies = self.dummies.clone();
        for &(a, b) in &self.edges {
            let span = level(b) - level(a);
            let mut prev = a;
            for step in 1..span {
                let d = next;
                next += 1;
                layer_index.push(level(a) + step);
                dummies.insert(d, (a, b));
                edges.push((prev, d));
                prev = d;
            }
            edges.push((prev, b));
        }

        let spec = DagSpec {
            states: (0..next).collect(),
            edges: edges.iter().map(|&(a, b)| [a, b]).collect(),
            initial: self.initial,
            terminating: self.terminating.clone(),
            layer_index: Some(layer_index),
            dummies: dummies.iter().map(|(&d, &(a, b))| [d, a, b]).collect(),
            rewards: None,
        };
        PointedDag::from_spec(&spec).expect("grading preserves validity")
    }

    /// Drops dummy states from a path, recovering the original trajectory.
    pub fn project_to_original(&self, path: &[StateId]) -> Vec<StateId> {
        path.iter()
            .copied()
            .filter(|s| !self.is_dummy(*s))
            .collect()
    }

    /// Number of complete trajectories, as a float (may be astronomically large).
    pub fn count_complete_trajectories(&self) -> f64 {
        let mut count = vec![0.0f64; self.n];
        count[self.initial] = 1.0;
        for &s in &self.topo {
            for &c in &self.children[s] {
                count[c] += count[s];
            }
        }
        self.terminating.iter().map(|&x| count[x]).sum()
    }

    /// Every path from the initial state to a terminating state, in
    /// depth-first order over children.
    pub fn enumerate_complete_trajectories(&self, cap: usize) -> Result<Vec<Vec<StateId>>> {
        if self.count_complete_trajectories() > cap as f64 {
            return Err(Error::CapExceeded { cap });
        }
        let mut out = Vec::new();
        self.dfs_paths(self.initial, &mut vec![self.initial], &mut out, &|s, _| {
            self.is_terminating[s]
        });
        Ok(out)
    }

    /// All partial trajectories from a state in layer `from` to a state in
    /// layer `to` of a graded DAG, grouped by start state (ascending).
    pub fn enumerate_layer_segments(
        &self,
        from: usize,
        to: usize,
        cap: usize,
    ) -> Result<Vec<Vec<StateId>>> {
        let layers = self.layers()?;
        if from >= to || to >= layers.len() {
            return Err(Error::InvalidSpec(format!("bad layer pair ({from}, {to})")));
        }
        let len = to - from + 1;
        let mut out = Vec::new();
        for &start in &layers[from] {
            self.dfs_paths(start, &mut vec![start], &mut out, &|_, path_len| {
                path_len == len
            });
            if out.len() > cap {
                return Err(Error::CapExceeded { cap });
            }
        }
        Ok(out)
    }

    fn dfs_paths<F>(
        &self,
        s: StateId,
        path: &mut Vec<StateId>,
        out: &mut Vec<Vec<StateId>>,
        done: &F,
    ) where
        F: Fn(StateId, usize) -> bool,
    {
        if done(s, path.len()) {
            out.push(path.clone());
            return;
        }
        for &c in &self.children[s] {
            path.push(c);
            self.dfs_paths(c, path, out, done);
            path.pop();
        }
    }
}

fn find_cycle_state(children: &[Vec<StateId>], indeg: &[usize]) -> StateId {
    // Walk forward inside the unprocessed subgraph until a state repeats.
    let n = children.len();
    let start = (0..n).find(|&s| indeg[s] > 0).unwrap_or(0);
    let mut visited = vec![false; n];
    let mut s = start;
    loop {
        if visited[s] {
            return s;
        }
        visited[s] = true;
        match children[s].iter().find(|&&c| indeg[c] > 0) {
            Some(&c) => s = c,
            None => return s,
        }
    }
}

fn check_layering(
    layers: &[usize],
    edges: &[[StateId; 2]],
    initial: StateId,
    is_terminating: &[bool],
) -> Result<(), DagError> {
    if layers.len() != is_terminating.len() {
        return Err(DagError::BadLayering(format!(
            "{} entries for {} states",
            layers.len(),
            is_terminating.len()
        )));
    }
    if layers[initial] != 0 {
        return Err(DagError::BadLayering(
            "initial state is not in layer 0".into(),
        ));
    }
    for &[a, b] in edges {
        if layers[b] != layers[a] + 1 {
            return Err(DagError::BadLayering(format!(
                "edge ({a}, {b}) skips layers"
            )));
        }
    }
    let max = layers.iter().copied().max().unwrap_or(0);
    for (s, &t) in is_terminating.iter().enumerate() {
        if t && layers[s] != max {
            return Err(DagError::BadLayering(format!(
                "terminating state {s} is not in the last layer"
            )));
        }
    }
    Ok(())
}
