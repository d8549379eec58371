use crate::agent::{policy_eval, Agent, Obs, WindowBatch};
use crate::pricing::{bs_delta, BsInputs};

/// What a strategy sees for one in-progress episode.
#[derive(Clone, Copy, Debug)]
pub struct StepContext<'a> {
    /// Observations so far, the current one last.
    pub history: &'a [Obs],
    /// Volatility attached to the episode, if any.
    pub sigma_hint: Option<f64>,
}

/// A rule mapping observation histories to hedge positions, one batch at a time.
pub trait HedgeStrategy: Sync {
    fn name(&self) -> String;
    fn act(&self, ctx: &[StepContext<'_>]) -> Result<Vec<f64>, String>;
}

/// Never holds the underlying.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroHedge;

impl HedgeStrategy for ZeroHedge {
    fn name(&self) -> String {
        "zero".into()
    }

    fn act(&self, ctx: &[StepContext<'_>]) -> Result<Vec<f64>, String> {
        Ok(vec![0.0; ctx.len()])
    }
}

/// Black–Scholes delta at zero rates with the episode's volatility, or a fixed one.
#[derive(Clone, Copy, Debug, Default)]
pub struct DeltaHedge {
    pub sigma: Option<f64>,
}

impl HedgeStrategy for DeltaHedge {
    fn name(&self) -> String {
        "delta".into()
    }

    fn act(&self, ctx: &[StepContext<'_>]) -> Result<Vec<f64>, String> {
        ctx.iter()
            .map(|c| {
                let sigma = self.sigma.or(c.sigma_hint).ok_or("delta hedge needs a volatility")?;
                let [m, tte, _] = *c.history.last().ok_or("empty history")?;
                let inp = BsInputs::new(m, 1.0, 0.0, sigma, tte).map_err(|e| e.to_string())?;
                Ok(bs_delta(&inp))
            })
            .collect()
    }
}

/// The agent's mean action, without exploration noise.
#[derive(Clone, Copy, Debug)]
pub struct AgentHedge<'a> {
    pub agent: &'a Agent,
}

impl HedgeStrategy for AgentHedge<'_> {
    fn name(&self) -> String {
        "agent".into()
    }

    fn act(&self, ctx: &[StepContext<'_>]) -> Result<Vec<f64>, String> {
        let hists: Vec<&[Obs]> = ctx.iter().map(|c| c.history).collect();
        let batch = WindowBatch::from_histories(&hists, self.agent.net.frames);
        let (mu, _) = policy_eval(&self.agent.actor, &self.agent.net, &batch).map_err(|e| e.to_string())?;
        Ok(mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_at_the_money() {
        let h = [[1.0, 20.0 / 252.0, 0.0]];
        let a = DeltaHedge { sigma: Some(0.2) }.act(&[StepContext { history: &h, sigma_hint: None }]).unwrap();
        let d1 = 0.5 * 0.2 * (20.0f64 / 252.0).sqrt();
        assert!((a[0] - crate::pricing::norm_cdf(d1)).abs() < 1e-15);
        assert!(DeltaHedge::default().act(&[StepContext { history: &h, sigma_hint: None }]).is_err());
    }
}
