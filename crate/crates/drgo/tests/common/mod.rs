//! Independent reference oracles for the acceptance suite. Nothing here
//! shares code with the implementations under test.

use drgo::matrix::Matrix;

/// Exact optimal-transport cost between weighted point sets under squared
/// Euclidean ground cost, solved as a min-cost flow by successive shortest
/// paths. Small instances only.
pub fn exact_ot_cost(
    p_points: &Matrix,
    p_weights: &[f64],
    q_points: &Matrix,
    q_weights: &[f64],
) -> f64 {
    let m = p_weights.len();
    let n = q_weights.len();
    let mut flow = MinCostFlow::new(m + n + 2);
    let source = m + n;
    let sink = m + n + 1;
    for (i, &w) in p_weights.iter().enumerate() {
        flow.add_edge(source, i, w, 0.0);
    }
    for (j, &w) in q_weights.iter().enumerate() {
        flow.add_edge(m + j, sink, w, 0.0);
    }
    for i in 0..m {
        for j in 0..n {
            let cost: f64 = p_points
                .row(i)
                .iter()
                .zip(q_points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            flow.add_edge(i, m + j, f64::INFINITY, cost);
        }
    }
    flow.min_cost_flow(source, sink)
}

struct FlowEdge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct MinCostFlow {
    edges: Vec<FlowEdge>,
    adj: Vec<Vec<usize>>,
}

impl MinCostFlow {
    fn new(n: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); n],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) {
        self.adj[from].push(self.edges.len());
        self.edges.push(FlowEdge { to, cap, cost });
        self.adj[to].push(self.edges.len());
        self.edges.push(FlowEdge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
    }

    /// Pushes as much flow as the network admits, Bellman-Ford shortest
    /// augmenting paths (costs go negative in the residual graph).
    fn min_cost_flow(&mut self, source: usize, sink: usize) -> f64 {
        const EPS: f64 = 1e-12;
        let n = self.adj.len();
        let mut total_cost = 0.0;
        loop {
            let mut dist = vec![f64::INFINITY; n];
            let mut prev_edge = vec![usize::MAX; n];
            dist[source] = 0.0;
            for _ in 0..n {
                let mut improved = false;
                for node in 0..n {
                    if !dist[node].is_finite() {
                        continue;
                    }
                    for &eid in &self.adj[node] {
                        let e = &self.edges[eid];
                        if e.cap > EPS && dist[node] + e.cost < dist[e.to] - 1e-15 {
                            dist[e.to] = dist[node] + e.cost;
                            prev_edge[e.to] = eid;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    break;
                }
            }
            if !dist[sink].is_finite() {
                break;
            }
            // bottleneck along the augmenting path
            let mut push = f64::INFINITY;
            let mut node = sink;
            while node != source {
                let eid = prev_edge[node];
                push = push.min(self.edges[eid].cap);
                node = self.edges[eid ^ 1].to;
            }
            if push <= EPS {
                break;
            }
            let mut node = sink;
            while node != source {
                let eid = prev_edge[node];
                self.edges[eid].cap -= push;
                self.edges[eid ^ 1].cap += push;
                total_cost += push * self.edges[eid].cost;
                node = self.edges[eid ^ 1].to;
            }
        }
        total_cost
    }
}

/// Betweenness centrality by explicit enumeration: for every unordered
/// pair, walk all simple paths up to the shortest length and count the
/// pass-throughs per interior node.
pub fn brute_force_betweenness(adj: &[Vec<usize>]) -> Vec<f64> {
    let n = adj.len();
    let mut centrality = vec![0.0; n];
    for s in 0..n {
        for t in (s + 1)..n {
            let Some(d) = bfs_distance(adj, s, t) else {
                continue;
            };
            let mut sigma = 0usize;
            let mut through = vec![0usize; n];
            let mut visited = vec![false; n];
            visited[s] = true;
            enumerate_paths(adj, s, t, d, &mut visited, &mut Vec::new(), &mut sigma, &mut through);
            if sigma == 0 {
                continue;
            }
            for v in 0..n {
                if v != s && v != t && through[v] > 0 {
                    centrality[v] += through[v] as f64 / sigma as f64;
                }
            }
        }
    }
    centrality
}

fn bfs_distance(adj: &[Vec<usize>], s: usize, t: usize) -> Option<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[s] = 0;
    let mut queue = std::collections::VecDeque::from([s]);
    while let Some(v) = queue.pop_front() {
        if v == t {
            return Some(dist[t]);
        }
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    None
}

#[allow(clippy::too_many_arguments)]
fn enumerate_paths(
    adj: &[Vec<usize>],
    cur: usize,
    t: usize,
    budget: usize,
    visited: &mut [bool],
    interior: &mut Vec<usize>,
    sigma: &mut usize,
    through: &mut [usize],
) {
    if cur == t {
        *sigma += 1;
        for &v in interior.iter() {
            through[v] += 1;
        }
        return;
    }
    if budget == 0 {
        return;
    }
    for &w in &adj[cur] {
        if visited[w] {
            continue;
        }
        visited[w] = true;
        if w != t {
            interior.push(w);
        }
        enumerate_paths(adj, w, t, budget - 1, visited, interior, sigma, through);
        if w != t {
            interior.pop();
        }
        visited[w] = false;
    }
}

/// Reference Recall@K on explicit sets.
pub fn brute_recall(ranked: &[u32], positives: &[u32], k: usize) -> f64 {
    let mut hits = 0usize;
    for item in ranked.iter().take(k) {
        if positives.contains(item) {
            hits += 1;
        }
    }
    hits as f64 / positives.len() as f64
}

/// Reference NDCG@K with 1/log2(rank+1) gains.
pub fn brute_ndcg(ranked: &[u32], positives: &[u32], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (idx, item) in ranked.iter().take(k).enumerate() {
        if positives.contains(item) {
            dcg += 1.0 / ((idx as f64) + 2.0).log2();
        }
    }
    let mut ideal = 0.0;
    for idx in 0..positives.len().min(k) {
        ideal += 1.0 / ((idx as f64) + 2.0).log2();
    }
    dcg / ideal
}
