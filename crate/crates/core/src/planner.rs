//! Best-first expansion of the mode-sequence tree.
//!
//! Every node carries a sequence, its cost matrix and the point-wise cost
//! `J = xᵀPx`. The frontier node with the smallest `J` is popped; if its
//! sequence already has length `d` the search stops, otherwise its `M`
//! children are pushed. Under the terminal-cost condition `J` never decreases
//! along a branch, so the first popped depth-`d` node is optimal.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use crate::linalg::{quad_form, Matrix, Vector};
use crate::riccati::{gain, MemoCache};
use crate::system::{ModeSequence, SwitchedSystem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, Default)]
pub struct PlanOptions {
    /// Record every created node for inspection or DOT export.
    pub trace: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceNode {
    pub parent: Option<usize>,
    pub sequence: ModeSequence,
    pub cost: f64,
    pub expanded: bool,
}

/// Every node created during one planning call, in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanTrace {
    pub nodes: Vec<TraceNode>,
    /// Node ids in the order they were popped.
    pub pops: Vec<usize>,
    pub selected: usize,
}

impl PlanTrace {
    /// Node ids from the root to the selected leaf.
    pub fn optimal_path(&self) -> Vec<usize> {
        let mut path = vec![self.selected];
        while let Some(parent) = self.nodes[*path.last().unwrap()].parent {
            path.push(parent);
        }
        path.reverse();
        path
    }

    /// Leaves left unexpanded at termination, excluding the selected one.
    pub fn frontier(&self) -> impl Iterator<Item = &TraceNode> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(id, n)| !n.expanded && *id != self.selected)
            .map(|(_, n)| n)
    }
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub sequence: ModeSequence,
    pub value: f64,
    /// Number of pops, the final one included.
    pub budget: usize,
    /// Gain of the head mode, `None` when `d = 0`.
    pub first_gain: Option<Matrix>,
    /// `(−K x, i₀)`, `None` when `d = 0`.
    pub first_input: Option<(Vector, usize)>,
    /// Tree nodes created, root included.
    pub explored_nodes: usize,
    /// Riccati operator applications this call added to the cache.
    pub riccati_evaluations: usize,
    pub trace: Option<PlanTrace>,
}

struct Entry {
    cost: f64,
    sequence: ModeSequence,
    id: usize,
}

// Max-heap order: the greatest entry is the one to pop next, i.e. the lowest
// cost, then the deepest, then the lexicographically smallest sequence.
impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| self.sequence.len().cmp(&other.sequence.len()))
            .then_with(|| other.sequence.cmp(&self.sequence))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Entry {}

fn debug_check_terminal(system: &SwitchedSystem, terminal: &Matrix) {
    if cfg!(debug_assertions) {
        let tol = crate::certificates::default_terminal_tol(system, terminal);
        let report = crate::certificates::verify_terminal_condition(system, terminal, tol);
        debug_assert!(
            report.as_ref().is_ok_and(|r| r.passed),
            "terminal matrix violates the terminal-cost condition: {report:?}"
        );
    }
}

/// Optimal `d`-length mode sequence at `x` and its cost `V*_d(x)`.
///
/// The cache's terminal matrix must satisfy the terminal-cost condition; this
/// is checked in debug builds only.
pub fn troop_plan(
    system: &SwitchedSystem,
    x: &Vector,
    d: usize,
    cache: &mut MemoCache,
    options: PlanOptions,
) -> Result<PlanResult> {
    if x.len() != system.n_x() {
        return Err(Error::Dimension(format!(
            "state has length {}, expected {}",
            x.len(),
            system.n_x()
        )));
    }
    debug_check_terminal(system, cache.terminal());
    let evaluations_before = cache.evaluations();

    let mut nodes: Vec<TraceNode> = Vec::new();
    let mut pops = Vec::new();
    let mut created = 1usize;
    let root_cost = quad_form(cache.terminal(), x);
    if options.trace {
        nodes.push(TraceNode {
            parent: None,
            sequence: ModeSequence::empty(),
            cost: root_cost,
            expanded: false,
        });
    }
    let mut frontier = BinaryHeap::new();
    frontier.push(Entry {
        cost: root_cost,
        sequence: ModeSequence::empty(),
        id: 0,
    });

    let mut budget = 0usize;
    let selected = loop {
        let node = frontier
            .pop()
            .expect("frontier is never empty before termination");
        budget += 1;
        if options.trace {
            pops.push(node.id);
        }
        if node.sequence.len() == d {
            break node;
        }
        if options.trace {
            nodes[node.id].expanded = true;
        }
        for mode in 0..system.num_modes() {
            let sequence = node.sequence.extended(mode);
            let cost = quad_form(cache.cost_matrix(system, sequence.as_slice())?, x);
            let id = created;
            created += 1;
            if options.trace {
                nodes.push(TraceNode {
                    parent: Some(node.id),
                    sequence: sequence.clone(),
                    cost,
                    expanded: false,
                });
            }
            frontier.push(Entry { cost, sequence, id });
        }
    };

    let (first_gain, first_input) = match selected.sequence.head() {
        Some(head) => {
            let tail = cache
                .get(selected.sequence.tail())
                .expect("suffixes of created nodes are cached");
            let k = gain(system, tail, head)?;
            let u = -(&k * x);
            (Some(k), Some((u, head)))
        }
        None => (None, None),
    };

    Ok(PlanResult {
        value: selected.cost,
        budget,
        first_gain,
        first_input,
        explored_nodes: created,
        riccati_evaluations: cache.evaluations() - evaluations_before,
        trace: options.trace.then_some(PlanTrace {
            nodes,
            pops,
            selected: selected.id,
        }),
        sequence: selected.sequence,
    })
}

/// `(−K x, i₀)` for the head of `result.sequence`, where `K` is built from
/// the cached cost matrix of the sequence's tail.
pub fn first_input(
    system: &SwitchedSystem,
    result: &PlanResult,
    x: &Vector,
    cache: &mut MemoCache,
) -> Result<(Vector, usize)> {
    let head = result.sequence.head().ok_or(Error::EmptySequence)?;
    let tail = cache.cost_matrix(system, result.sequence.tail())?;
    let k = gain(system, tail, head)?;
    Ok((-(k * x), head))
}

/// Formats with four significant digits.
fn four_digits(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        format!("{:.*}", (3 - exp).max(0) as usize, v)
    } else {
        format!("{v:.3e}")
    }
}

/// Graphviz digraph of a planner trace. Expanded nodes are filled, the path
/// to the selected leaf is drawn in magenta.
pub fn export_tree_dot(trace: &PlanTrace) -> Result<String> {
    if trace.nodes.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let path = trace.optimal_path();
    let on_path = |id: usize| path.contains(&id);
    let mut out = String::from("digraph troop {\n  node [shape=box, fontname=\"monospace\"];\n");
    for (id, n) in trace.nodes.iter().enumerate() {
        let mut attrs = format!("label=\"{}\\nJ={}\"", n.sequence, four_digits(n.cost));
        if n.expanded {
            attrs.push_str(", style=filled, fillcolor=lightblue");
        }
        if on_path(id) {
            attrs.push_str(", color=magenta, penwidth=2");
        }
        if id == trace.selected {
            attrs.push_str(", peripheries=2");
        }
        writeln!(out, "  n{id} [{attrs}];").unwrap();
    }
    for (id, n) in trace.nodes.iter().enumerate() {
        if let Some(parent) = n.parent {
            if on_path(id) && on_path(parent) {
                writeln!(out, "  n{parent} -> n{id} [color=magenta, penwidth=2];").unwrap();
            } else {
                writeln!(out, "  n{parent} -> n{id};").unwrap();
            }
        }
    }
    out.push_str("}\n");
    Ok(out)
}
