use super::modchain::{EnvConfig, Op};
use crate::error::{CoreError, Result};

/// Largest state-action table value iteration will accept.
const MAX_TABLE: usize = 10_000_000;

/// The chain-building MDP seen by an agent that observes the running
/// value: state (step, value), action = op, each step slips to a uniform
/// random op with probability `slip`, reward 1 at the end iff the value
/// equals the gold answer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainMdp {
    pub modulus: u32,
    pub horizon: usize,
    pub ops: Vec<Op>,
    pub slip: f64,
}

impl From<&EnvConfig> for ChainMdp {
    fn from(c: &EnvConfig) -> Self {
        ChainMdp {
            modulus: c.modulus,
            horizon: c.horizon,
            ops: c.ops.clone(),
            slip: c.slip,
        }
    }
}

impl ChainMdp {
    /// Next-value distribution after choosing `action` at `value`.
    pub fn successors(&self, value: u32, action: usize) -> Vec<(u32, f64)> {
        let n = self.ops.len() as f64;
        let mut out = vec![(self.ops[action].apply(value, self.modulus), 1.0 - self.slip)];
        if self.slip > 0.0 {
            out.extend(
                self.ops
                    .iter()
                    .map(|op| (op.apply(value, self.modulus), self.slip / n)),
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIteration {
    /// Optimal expected (discounted) terminal reward from the start value.
    pub optimum: f64,
    /// `values[t][v]`, t = 0..=horizon
    pub values: Vec<Vec<f64>>,
    /// `policy[t][v]`: best op index, lowest index on ties; t < horizon
    pub policy: Vec<Vec<usize>>,
    pub sweeps: usize,
}

impl ValueIteration {
    pub fn action(&self, step: usize, value: u32) -> usize {
        self.policy[step][value as usize]
    }
}

/// Synchronous value iteration over the whole (step, value) table until
/// the sup-norm change drops below 1e-10.
pub fn value_iteration_optimum(
    mdp: &ChainMdp,
    start: u32,
    gold: u32,
    discount: f64,
) -> Result<ValueIteration> {
    if mdp.modulus < 2 || mdp.ops.is_empty() {
        return Err(CoreError::InvalidConfig(
            "value iteration needs modulus >= 2 and at least one op".into(),
        ));
    }
    if !(discount > 0.0 && discount <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "discount must lie in (0, 1], got {discount}"
        )));
    }
    let m = mdp.modulus as usize;
    let table = m
        .checked_mul(mdp.horizon + 1)
        .and_then(|x| x.checked_mul(mdp.ops.len()));
    match table {
        Some(n) if n <= MAX_TABLE => {}
        _ => {
            return Err(CoreError::NotEnumerable(format!(
                "modulus {} x horizon {} x {} ops exceeds {MAX_TABLE} state-actions",
                mdp.modulus,
                mdp.horizon,
                mdp.ops.len()
            )))
        }
    }

    let t_len = mdp.horizon;
    let terminal: Vec<f64> = (0..m)
        .map(|v| f64::from(u8::from(v as u32 == gold % mdp.modulus)))
        .collect();
    let mut values = vec![vec![0.0; m]; t_len + 1];
    values[t_len] = terminal;
    let mut policy = vec![vec![0usize; m]; t_len];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        let mut next = values.clone();
        for t in 0..t_len {
            for v in 0..m {
                let mut best = f64::NEG_INFINITY;
                let mut best_a = 0;
                for a in 0..mdp.ops.len() {
                    let q: f64 = discount
                        * mdp
                            .successors(v as u32, a)
                            .iter()
                            .map(|&(nv, p)| p * values[t + 1][nv as usize])
                            .sum::<f64>();
                    if q > best + 1e-15 {
                        best = q;
                        best_a = a;
                    }
                }
                delta = delta.max((best - values[t][v]).abs());
                next[t][v] = best;
                policy[t][v] = best_a;
            }
        }
        values = next;
        if delta < 1e-10 || sweeps > t_len + 2 {
            break;
        }
    }
    Ok(ValueIteration {
        optimum: values[0][(start % mdp.modulus) as usize],
        values,
        policy,
        sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mdp(modulus: u32, horizon: usize, ops: Vec<Op>, slip: f64) -> ChainMdp {
        ChainMdp {
            modulus,
            horizon,
            ops,
            slip,
        }
    }

    #[test]
    fn identity_ops_always_reach_gold() {
        let m = mdp(5, 3, vec![Op::Add(0), Op::Mul(1)], 0.4);
        let vi = value_iteration_optimum(&m, 2, 2, 1.0).unwrap();
        assert!((vi.optimum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn horizon_zero_is_an_indicator() {
        let m = mdp(5, 0, vec![Op::Add(1)], 0.0);
        assert_eq!(value_iteration_optimum(&m, 3, 3, 1.0).unwrap().optimum, 1.0);
        assert_eq!(value_iteration_optimum(&m, 3, 4, 1.0).unwrap().optimum, 0.0);
    }

    #[test]
    fn deterministic_reachable_gold_is_one() {
        let m = mdp(7, 2, vec![Op::Add(1), Op::Mul(2)], 0.0);
        // 3 -> +1 -> 4 -> *2 -> 1
        let vi = value_iteration_optimum(&m, 3, 1, 1.0).unwrap();
        assert_eq!(vi.optimum, 1.0);
        assert_eq!(vi.action(0, 3), 0);
        assert_eq!(vi.action(1, 4), 1);
    }

    #[test]
    fn discount_scales_terminal_reward() {
        let m = mdp(7, 2, vec![Op::Add(1), Op::Mul(2)], 0.0);
        let vi = value_iteration_optimum(&m, 3, 1, 0.5).unwrap();
        assert!((vi.optimum - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_huge_tables() {
        let m = mdp(1_000_000, 100, vec![Op::Add(1)], 0.0);
        assert!(matches!(
            value_iteration_optimum(&m, 0, 0, 1.0),
            Err(CoreError::NotEnumerable(_))
        ));
    }
}
