use protoml_core::model::{Block, ComponentId, Endpoint, NodeInstance, NodeRef};
use protoml_core::validate::topo_sort;
use proptest::prelude::*;

/// Random DAG over `n` nodes: edges only go from lower to higher index
/// in a shuffled labelling, so declaration order is not a valid answer.
fn dag(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> Block {
    let mut b = Block::new(ComponentId::new("t", "G"), 1, 1);
    for l in &labels[..n] {
        b.nodes.push(NodeInstance::new(format!("n{l}"), ComponentId::new("t", "Op")));
    }
    for &(a, c) in edges {
        let (lo, hi) = (a.min(c), a.max(c));
        if lo != hi {
            b.connect(Endpoint::node(&format!("n{}", labels[lo]), 0), Endpoint::node(&format!("n{}", labels[hi]), 0));
        }
    }
    b
}

fn reachable(n: usize, adj: &[Vec<usize>]) -> Vec<Vec<bool>> {
    let mut r = vec![vec![false; n]; n];
    for (s, row) in r.iter_mut().enumerate() {
        let mut stack = vec![s];
        while let Some(x) = stack.pop() {
            for &y in &adj[x] {
                if !row[y] {
                    row[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    r
}

proptest! {
    #[test]
    fn order_is_a_linear_extension(
        n in 1usize..9,
        edges in proptest::collection::vec((0usize..9, 0usize..9), 0..20),
        perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let edges: Vec<_> = edges.into_iter().filter(|(a, b)| *a < n && *b < n).collect();
        let labels: Vec<usize> = perm.into_iter().filter(|&x| x < n).collect();
        let b = dag(n, &edges, &labels);
        let order = topo_sort(&b).unwrap();
        prop_assert_eq!(order.len(), n + 2);
        prop_assert_eq!(&order[0], &NodeRef::Input);
        prop_assert_eq!(order.last().unwrap(), &NodeRef::Output);

        // brute-force reachability in label space
        let mut adj = vec![Vec::new(); n];
        for e in &b.edges {
            if let (NodeRef::Node(f), NodeRef::Node(t)) = (&e.from.node, &e.to.node) {
                adj[f[1..].parse::<usize>().unwrap()].push(t[1..].parse::<usize>().unwrap());
            }
        }
        let reach = reachable(n, &adj);
        let pos: Vec<usize> = (0..n)
            .map(|l| order.iter().position(|x| x == &NodeRef::Node(format!("n{l}"))).unwrap())
            .collect();
        for a in 0..n {
            for c in 0..n {
                if reach[a][c] {
                    prop_assert!(pos[a] < pos[c], "n{} reaches n{} but comes later", a, c);
                }
            }
        }
    }
}
