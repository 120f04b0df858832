/// A named parameter or buffer tensor together with its gradient accumulator.
///
/// Buffers (batch-norm running statistics) are `Param`s with
/// `trainable == false`; they are checkpointed but never updated by the optimizer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: &[usize], value: Vec<f32>) -> Self {
        let mut p = Self::new(name, shape, value);
        p.trainable = false;
        p.grad = Vec::new();
        p
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Param));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.numel()
            }
        });
        n
    }

    /// Copies of every parameter and buffer value, in visiting order.
    fn snapshot(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.value.clone()));
        out
    }

    fn restore(&mut self, snapshot: &[Vec<f32>]) {
        let mut i = 0;
        self.visit_mut(&mut |p| {
            p.value.copy_from_slice(&snapshot[i]);
            i += 1;
        });
    }
}
