//! Dynamic query initialization: initial queries from a pooled memory summary,
//! `Q_init = FC(GlobalAvgPool(M))`, reshaped row-major to `N×d`.

use rand_chacha::ChaCha8Rng;

use crate::backbone::Memory;
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct DqInit {
    /// `(N·d)×d`
    fc_weight: ParamId,
    /// `N·d`
    fc_bias: ParamId,
    num_queries: usize,
    dim: usize,
}

impl DqInit {
    /// `fc_weight ~ U(±1/√d)`, `fc_bias = 0`.
    pub fn build<T: Scalar>(num_queries: usize, dim: usize, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let nd = num_queries * dim;
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            fc_weight: store.add("dqinit.fc_weight", ParamGroup::Head, uniform(&[nd, dim], bound, rng)),
            fc_bias: store.add("dqinit.fc_bias", ParamGroup::Head, crate::tensor::Tensor::zeros(&[nd])),
            num_queries,
            dim,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.fc_weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.fc_bias
    }

    /// `N·d·d + N·d`.
    pub fn param_count(num_queries: usize, dim: usize) -> usize {
        num_queries * dim * dim + num_queries * dim
    }

    /// Initial queries `N×d` from the memory's `d×h×w` features.
    pub fn init_queries<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bound, memory: &Memory) -> Result<Var> {
        let (c, _, _) = tape.value(memory.features).dims3("dqinit")?;
        if c != self.dim {
            return Err(Error::dim(
                "dqinit",
                format!("memory has {c} channels, initializer expects {}", self.dim),
            ));
        }
        let nd = self.num_queries * self.dim;
        let pooled = tape.global_avg_pool(memory.features)?;
        let column = tape.reshape(pooled, &[self.dim, 1])?;
        let projected = tape.matmul(params.var(self.fc_weight), column)?;
        let bias = tape.reshape(params.var(self.fc_bias), &[nd, 1])?;
        let shifted = tape.add(projected, bias)?;
        tape.reshape(shifted, &[self.num_queries, self.dim])
    }
}
