//! Exact 1-Wasserstein distance between discrete distributions on a shared
//! support, solved as a transportation problem by successive shortest
//! augmenting paths with node potentials.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("mismatched support: p has {p} points, q has {q}, cost has {cost} entries")]
    MismatchedSupport { p: usize, q: usize, cost: usize },
    #[error("{side} is not a probability vector (sum {sum})")]
    NotADistribution { side: &'static str, sum: f64 },
    #[error("negative mass at index {0}")]
    NegativeMass(usize),
    #[error("augmenting path search stalled with {remaining} mass left")]
    Stalled { remaining: f64 },
}

const MASS_EPS: f64 = 1e-13;

/// Exact optimal-transport cost between `p` and `q` under the dense cost
/// matrix `cost` (row-major n x n, nonnegative).
pub fn w1_discrete(p: &[f64], q: &[f64], cost: &[f64]) -> Result<f64, TransportError> {
    let n = p.len();
    if q.len() != n || cost.len() != n * n {
        return Err(TransportError::MismatchedSupport {
            p: n,
            q: q.len(),
            cost: cost.len(),
        });
    }
    for (i, &v) in p.iter().chain(q.iter()).enumerate() {
        if v < 0.0 {
            return Err(TransportError::NegativeMass(i % n));
        }
    }
    let sum_p: f64 = p.iter().sum();
    let sum_q: f64 = q.iter().sum();
    if (sum_p - 1.0).abs() > 1e-9 {
        return Err(TransportError::NotADistribution { side: "p", sum: sum_p });
    }
    if (sum_q - 1.0).abs() > 1e-9 {
        return Err(TransportError::NotADistribution { side: "q", sum: sum_q });
    }

    let mut supply = p.to_vec();
    let mut demand = q.to_vec();
    let mut flow = vec![0.0; n * n];
    // potentials: pi_src over sources, pi_snk over sinks
    let mut pi_src = vec![0.0; n];
    let mut pi_snk = vec![0.0; n];

    let mut remaining: f64 = supply.iter().sum();
    let max_rounds = 4 * n * n + 16;
    let mut rounds = 0;
    while remaining > MASS_EPS {
        rounds += 1;
        if rounds > max_rounds {
            return Err(TransportError::Stalled { remaining });
        }
        // Dijkstra over the bipartite residual graph; nodes 0..n are sources,
        // n..2n are sinks.
        let mut dist = vec![f64::INFINITY; 2 * n];
        let mut prev: Vec<Option<usize>> = vec![None; 2 * n];
        let mut done = vec![false; 2 * n];
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
            }
        }
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..2 * n {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u < n {
                // forward edges source u -> every sink
                for j in 0..n {
                    let rc = (cost[u * n + j] + pi_src[u] - pi_snk[j]).max(0.0);
                    let v = n + j;
                    if !done[v] && dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        prev[v] = Some(u);
                    }
                }
            } else {
                // backward edges sink -> source with positive flow
                let j = u - n;
                for i in 0..n {
                    if flow[i * n + j] > MASS_EPS {
                        let rc = (-cost[i * n + j] - pi_src[i] + pi_snk[j]).max(0.0);
                        if !done[i] && dist[u] + rc < dist[i] {
                            dist[i] = dist[u] + rc;
                            prev[i] = Some(u);
                        }
                    }
                }
            }
        }

        // nearest sink with unmet demand
        let mut target = None;
        let mut best = f64::INFINITY;
        for j in 0..n {
            if demand[j] > MASS_EPS && dist[n + j] < best {
                best = dist[n + j];
                target = Some(n + j);
            }
        }
        let Some(target) = target else {
            return Err(TransportError::Stalled { remaining });
        };

        // bottleneck along the path
        let mut bottleneck = demand[target - n];
        let mut v = target;
        while let Some(u) = prev[v] {
            if v >= n {
                // edge u(source) -> v(sink): unbounded capacity
            } else {
                // edge u(sink) -> v(source): backward, capacity = flow
                bottleneck = bottleneck.min(flow[v * n + (u - n)]);
            }
            v = u;
        }
        // path starts at a source with remaining supply
        bottleneck = bottleneck.min(supply[v]);

        // apply augmentation
        let mut node = target;
        while let Some(u) = prev[node] {
            if node >= n {
                flow[u * n + (node - n)] += bottleneck;
            } else {
                flow[node * n + (u - n)] -= bottleneck;
            }
            node = u;
        }
        supply[node] -= bottleneck;
        demand[target - n] -= bottleneck;
        remaining -= bottleneck;

        // update potentials to keep reduced costs nonnegative
        let dmax = dist[target];
        for i in 0..n {
            if dist[i].is_finite() {
                pi_src[i] += dist[i].min(dmax);
            } else {
                pi_src[i] += dmax;
            }
        }
        for j in 0..n {
            if dist[n + j].is_finite() {
                pi_snk[j] += dist[n + j].min(dmax);
            } else {
                pi_snk[j] += dmax;
            }
        }
    }

    Ok(flow
        .iter()
        .zip(cost.iter())
        .map(|(f, c)| f * c)
        .sum())
}
