use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::Tensor;

fn scalar_loss(
    inputs: &[Tensor],
    projection: &mut Option<Tensor>,
    f: &impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<(Graph, Vec<NodeId>, NodeId)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let loss = if g.value(out).len() == 1 {
        out
    } else {
        let shape = g.value(out).shape().to_vec();
        let r = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            let n = shape.iter().product();
            Tensor::new(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("projection shape")
        });
        let r = g.leaf(r.clone());
        let weighted = g.mul(out, r)?;
        g.sum(weighted)?
    };
    Ok((g, ids, loss))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps`. Non-scalar outputs are reduced with a fixed random
/// projection. Returns the largest norm-wise relative error
/// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the inputs.
pub fn gradcheck(inputs: &[Tensor], eps: f64, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) -> Result<f64> {
    let mut projection = None;
    let (g, ids, loss) = scalar_loss(inputs, &mut projection, &f)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for j in 0..inputs[i].len() {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[i].data_mut()[j] += delta;
                let (g, _, loss) = scalar_loss(&shifted, &mut projection, &f)?;
                Ok(g.value(loss).data()[0])
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let a = analytic.data()[j];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let scale = a2.sqrt().max(n2.sqrt());
        if scale > 0.0 {
            worst = worst.max(diff2.sqrt() / scale);
        }
    }
    Ok(worst)
}
