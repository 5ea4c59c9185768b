use serde::{Deserialize, Serialize};

use super::OptError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdStop {
    /// Objective name.
    pub objective: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopCriteria {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_budget_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdStop>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OperatorConfig {
    pub crossover: bool,
    pub fm_mutation_prob: f64,
    pub token_mutation_prob: f64,
    pub bitflip_prob: f64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig { crossover: true, fm_mutation_prob: 0.3, token_mutation_prob: 0.5, bitflip_prob: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub population_size: usize,
    /// Generation 1 is the initial population.
    pub generations: u32,
    pub master_seed: u64,
    pub stop: StopCriteria,
    pub operators: OperatorConfig,
    pub tournament_size: usize,
    pub self_reflection: bool,
    /// Maximum characters of reflection feedback kept per round.
    pub feedback_cap: usize,
    /// Concurrent instance evaluations.
    pub workers: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            population_size: 10,
            generations: 5,
            master_seed: 0,
            stop: StopCriteria::default(),
            operators: OperatorConfig::default(),
            tournament_size: 2,
            self_reflection: false,
            feedback_cap: 1000,
            workers: 4,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptError> {
        let bad = |m: &str| Err(OptError::Config(m.to_string()));
        if self.population_size == 0 {
            return bad("population_size must be positive");
        }
        if self.generations == 0 {
            return bad("generations must be positive");
        }
        if self.tournament_size < 2 {
            return bad("tournament_size must be at least 2");
        }
        let ops = &self.operators;
        for (name, p) in [
            ("fm_mutation_prob", ops.fm_mutation_prob),
            ("token_mutation_prob", ops.token_mutation_prob),
            ("bitflip_prob", ops.bitflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be in [0, 1]"));
            }
        }
        if ops.fm_mutation_prob + ops.token_mutation_prob > 1.0 + 1e-12 {
            return bad("fm_mutation_prob + token_mutation_prob must not exceed 1");
        }
        if self.workers == 0 {
            return bad("workers must be positive");
        }
        Ok(())
    }
}
