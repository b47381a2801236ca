//! Prefix-masked average pooling of a key/value cache into one embedding.

use dual_actor_rl::actors::{pooled_prefix_embedding, KvTensor};

fn main() -> dual_actor_rl::Result<()> {
    // Four tokens, one head, two channels; the last token is padding.
    let (t, h, d) = (4, 1, 2);
    let k = KvTensor::new(t, h, d, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 100.0, 100.0])?;
    let v = KvTensor::new(t, h, d, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, -9.0, -9.0])?;
    let mask = [1, 1, 1, 0];
    let pooled = pooled_prefix_embedding(&k, &v, &mask)?;
    println!("mask {mask:?}");
    println!("K pooled {:?}", &pooled[..h * d]);
    println!("V pooled {:?}", &pooled[h * d..]);
    Ok(())
}
