use rand::Rng;

use crate::diffcore::{mix_seed, name_hash, seeded_rng, Bindings, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Affine map `x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Kaiming-uniform fan-in values for an `in x out` weight, seeded per name.
pub(crate) fn kaiming_uniform(name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Vec<f64> {
    let bound = (6.0 / in_dim as f64).sqrt();
    let mut rng = seeded_rng(mix_seed(seed, 0x6b61_696d), name_hash(name));
    (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect()
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, seed: u64) -> Self {
        let wname = format!("{name}.weight");
        let w = Tensor::new(vec![in_dim, out_dim], kaiming_uniform(&wname, in_dim, out_dim, seed))
            .expect("kaiming shape");
        let weight = store.push(wname, w);
        let bias = bias.then(|| store.push(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, bind: &mut Bindings, x: Var) -> Result<Var> {
        let w = store.bind(tape, bind, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = store.bind(tape, bind, b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// `shortcut(x) + fc2(relu(fc1(x)))`.
///
/// The shortcut is the identity when input and output widths agree and a
/// bias-free projection otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub shortcut: Option<Linear>,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let fc1 = Linear::new(store, &format!("{name}.fc1"), in_dim, out_dim, true, seed);
        let fc2 = Linear::new(store, &format!("{name}.fc2"), out_dim, out_dim, true, seed);
        let shortcut = (in_dim != out_dim).then(|| Linear::new(store, &format!("{name}.shortcut"), in_dim, out_dim, false, seed));
        ResidualBlock { fc1, fc2, shortcut }
    }

    /// A block whose initial output equals the trailing `out_dim` features
    /// of its input: `fc2` starts at zero and the projection shortcut (if
    /// any) is a frozen selector of the last `out_dim` input columns, so the
    /// skip path carries those features unchanged like an identity skip.
    pub fn continuation(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let blk = Self::new(store, name, in_dim, out_dim, seed);
        store.replace_value(blk.fc2.weight, Tensor::zeros(&[out_dim, out_dim]));
        if let Some(p) = &blk.shortcut {
            let mut w = Tensor::zeros(&[in_dim, out_dim]);
            let offset = in_dim.saturating_sub(out_dim);
            for j in 0..out_dim.min(in_dim) {
                w.data_mut()[(offset + j) * out_dim + j] = 1.0;
            }
            store.replace_value(p.weight, w);
            store.set_frozen(p.weight, true);
        }
        blk
    }

    pub fn in_dim(&self) -> usize {
        self.fc1.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, bind: &mut Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(store, tape, bind, x)?;
        let h = tape.relu(h)?;
        let r = self.fc2.forward(store, tape, bind, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(store, tape, bind, x)?,
            None => x,
        };
        tape.add(skip, r)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count() + self.shortcut.as_ref().map_or(0, Linear::param_count)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        if let Some(s) = &self.shortcut {
            p.extend(s.params());
        }
        p
    }
}

/// Two-layer MLP from the expand-layer width to the classifier dimension,
/// with a hidden layer twice the input width.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptLayer {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl AdaptLayer {
    pub fn new(store: &mut ParamStore, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        AdaptLayer {
            fc1: Linear::new(store, "adapt.fc1", in_dim, 2 * in_dim, true, seed),
            fc2: Linear::new(store, "adapt.fc2", 2 * in_dim, out_dim, true, seed),
        }
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, bind: &mut Bindings, x: Var) -> Result<Var> {
        let h = self.fc1.forward(store, tape, bind, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(store, tape, bind, h)
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count() + self.fc2.param_count()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}
