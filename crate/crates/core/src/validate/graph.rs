//! Structural checks over a block's edge set.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use crate::diagnostics::{Diagnostic, Location};
use crate::model::{Block, Branch, Endpoint, NodeRef, Project};

/// Strongly connected components that contain a cycle, members in declaration
/// order, components ordered by their first member.
pub fn find_cycles(block: &Block) -> Vec<Vec<String>> {
    let n = block.nodes.len();
    let index: BTreeMap<&str, usize> = block.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for e in &block.edges {
        if let (NodeRef::Node(a), NodeRef::Node(b)) = (&e.from.node, &e.to.node) {
            if let (Some(&a), Some(&b)) = (index.get(a.as_str()), index.get(b.as_str())) {
                succ[a].insert(b);
            }
        }
    }

    // iterative Tarjan
    let mut idx = vec![usize::MAX; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut next = 0;
    let mut sccs: Vec<Vec<usize>> = Vec::new();
    for root in 0..n {
        if idx[root] != usize::MAX {
            continue;
        }
        let mut work: Vec<(usize, Vec<usize>)> = vec![(root, succ[root].iter().copied().collect())];
        idx[root] = next;
        low[root] = next;
        next += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some((v, pending)) = work.last_mut() {
            let v = *v;
            if let Some(w) = pending.pop() {
                if idx[w] == usize::MAX {
                    idx[w] = next;
                    low[w] = next;
                    next += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    work.push((w, succ[w].iter().copied().collect()));
                } else if on_stack[w] {
                    low[v] = low[v].min(idx[w]);
                }
                continue;
            }
            work.pop();
            if let Some((parent, _)) = work.last() {
                low[*parent] = low[*parent].min(low[v]);
            }
            if low[v] == idx[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                if comp.len() > 1 || succ[v].contains(&v) {
                    comp.sort_unstable();
                    sccs.push(comp);
                }
            }
        }
    }
    sccs.sort();
    sccs.into_iter().map(|c| c.into_iter().map(|i| block.nodes[i].id.clone()).collect()).collect()
}

/// Kahn's algorithm with ties broken by declaration order. `Err` carries the
/// nodes that could not be ordered.
pub fn topo_sort(block: &Block) -> Result<Vec<NodeRef>, Vec<String>> {
    let n = block.nodes.len();
    let index: BTreeMap<&str, usize> = block.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &block.edges {
        let to = match &e.to.node {
            NodeRef::Node(b) => index.get(b.as_str()).copied(),
            _ => None,
        };
        let Some(to) = to else { continue };
        match &e.from.node {
            NodeRef::Node(a) => {
                if let Some(&from) = index.get(a.as_str()) {
                    succ[from].push(to);
                    indegree[to] += 1;
                }
            }
            NodeRef::Input | NodeRef::Output => {}
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|i| indegree[*i] == 0).map(Reverse).collect();
    let mut order = vec![NodeRef::Input];
    while let Some(Reverse(v)) = ready.pop() {
        order.push(NodeRef::Node(block.nodes[v].id.clone()));
        for &w in &succ[v] {
            indegree[w] -= 1;
            if indegree[w] == 0 {
                ready.push(Reverse(w));
            }
        }
    }
    if order.len() != n + 1 {
        let placed: BTreeSet<&NodeRef> = order.iter().collect();
        return Err(block.nodes.iter().filter(|x| !placed.contains(&NodeRef::Node(x.id.clone()))).map(|x| x.id.clone()).collect());
    }
    order.push(NodeRef::Output);
    Ok(order)
}

/// Position of every node for diagnostic ordering: topological when the graph
/// is acyclic, declaration order for nodes that cannot be ordered.
pub fn node_positions(block: &Block) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    out.insert("Input".to_string(), 0);
    let order = match topo_sort(block) {
        Ok(o) => o,
        Err(_) => std::iter::once(NodeRef::Input)
            .chain(block.nodes.iter().map(|n| NodeRef::Node(n.id.clone())))
            .chain(std::iter::once(NodeRef::Output))
            .collect(),
    };
    for (i, n) in order.iter().enumerate() {
        out.insert(n.to_string(), i);
    }
    out
}

/// GRAPH_CYCLE, UNCONNECTED_INPUT, MISSING_JOIN_POLICY, UNUSED_JOIN_POLICY,
/// DANGLING_OUTPUT and UNRESOLVED_COMPONENT.
pub fn check_graph(block: &Block, project: &Project) -> Vec<Diagnostic> {
    let bid = block.id.to_string();
    let mut out = Vec::new();
    for cycle in find_cycles(block) {
        out.push(Diagnostic::error(
            "GRAPH_CYCLE",
            Location::block(&bid).node(&cycle[0]),
            format!("nodes form a cycle: {{{}}}", cycle.join(", ")),
        ));
    }

    let fan_in = |to: &Endpoint, branch: Branch| block.edges.iter().filter(|e| &e.to == to && e.branch == branch).count();
    let check_port = |out: &mut Vec<Diagnostic>, node: &str, port: usize, sides: &[(Branch, &str)], policy: bool| {
        let ep = if node == "Output" { Endpoint::output(port) } else { Endpoint::node(node, port) };
        let mut max_fan = 0;
        for (branch, label) in sides {
            let n = fan_in(&ep, *branch);
            max_fan = max_fan.max(n);
            let loc = Location::block(&bid).node(node).port(port);
            if n == 0 {
                let what = if node == "Output" { format!("block output {port}") } else { format!("input {port}{label}") };
                out.push(Diagnostic::error("UNCONNECTED_INPUT", loc, format!("{what} has no incoming edge")));
            } else if n > 1 && !policy {
                out.push(Diagnostic::error("MISSING_JOIN_POLICY", loc, format!("{n} edges enter input {port}{label} without a join policy")));
            }
        }
        if policy && max_fan < 2 {
            out.push(Diagnostic::warning(
                "UNUSED_JOIN_POLICY",
                Location::block(&bid).node(node).port(port),
                format!("join policy on input {port} has fewer than two incoming edges"),
            ));
        }
    };

    for node in &block.nodes {
        let Some(def) = project.resolve(&node.component) else {
            out.push(Diagnostic::error(
                "UNRESOLVED_COMPONENT",
                Location::block(&bid).node(&node.id),
                format!("component `{}` does not exist", node.component),
            ));
            continue;
        };
        if let Some(c) = &node.conditional {
            if project.resolve(&c.else_component).is_none() {
                out.push(Diagnostic::error(
                    "UNRESOLVED_COMPONENT",
                    Location::block(&bid).node(&node.id),
                    format!("component `{}` does not exist", c.else_component),
                ));
            }
        }
        let sides: &[(Branch, &str)] =
            if node.conditional.is_some() { &[(Branch::True, " (true side)"), (Branch::False, " (false side)")] } else { &[(Branch::None, "")] };
        for port in 0..def.input_count() {
            check_port(&mut out, &node.id, port, sides, node.joins.contains_key(&port));
        }
        for port in 0..def.output_count() {
            let from = Endpoint::node(&node.id, port);
            if !block.edges.iter().any(|e| e.from == from) {
                out.push(Diagnostic::warning(
                    "DANGLING_OUTPUT",
                    Location::block(&bid).node(&node.id).port(port),
                    format!("output {port} is not used"),
                ));
            }
        }
    }
    for port in 0..block.output_count {
        check_port(&mut out, "Output", port, &[(Branch::None, "")], block.output_joins.contains_key(&port));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComponentId, NodeInstance};

    fn chain_block(nodes: &[&str], edges: &[(&str, &str)]) -> Block {
        let mut b = Block::new(ComponentId::new("t", "B"), 1, 1);
        for n in nodes {
            b.nodes.push(NodeInstance::new(*n, ComponentId::new("t", "M")));
        }
        for (f, t) in edges {
            b.connect(f.parse().unwrap(), t.parse().unwrap());
        }
        b
    }

    #[test]
    fn diamond_order_follows_declaration() {
        let b = chain_block(
            &["a", "b", "c", "d"],
            &[("Input:0", "a:0"), ("a:0", "c:0"), ("a:0", "b:0"), ("b:0", "d:0"), ("c:0", "d:0"), ("d:0", "Output:0")],
        );
        let order: Vec<String> = topo_sort(&b).unwrap().iter().map(|n| n.to_string()).collect();
        assert_eq!(order, ["Input", "a", "b", "c", "d", "Output"]);
    }

    #[test]
    fn single_node() {
        let b = chain_block(&["a"], &[("Input:0", "a:0"), ("a:0", "Output:0")]);
        let order: Vec<String> = topo_sort(&b).unwrap().iter().map(|n| n.to_string()).collect();
        assert_eq!(order, ["Input", "a", "Output"]);
    }

    #[test]
    fn two_cycle_found() {
        let b = chain_block(&["a", "b", "c"], &[("a:0", "b:0"), ("b:0", "a:0"), ("Input:0", "c:0")]);
        assert_eq!(find_cycles(&b), vec![vec!["a".to_string(), "b".to_string()]]);
        assert_eq!(topo_sort(&b).unwrap_err(), ["a", "b"]);
        let selfloop = chain_block(&["a"], &[("a:0", "a:0")]);
        assert_eq!(find_cycles(&selfloop), vec![vec!["a".to_string()]]);
    }
}
