use spikedrive::Model;

/// Freshly initialised normalization leaves Q, K and V far below threshold at inference,
/// so attention is silent. Shifting their normalization offsets to the threshold makes
/// roughly half of them fire, which is what the attention checks need to be non-trivial.
pub fn wake_attention(model: &mut Model) {
    let u_th = model.config().lif.u_th;
    for t in model.store_mut().tensors_mut() {
        let n = &t.name;
        if n.starts_with("blocks.") && [".attn.q.bn.beta", ".attn.k.bn.beta", ".attn.v.bn.beta"].iter().any(|s| n.ends_with(s)) {
            t.value.fill(u_th);
        }
    }
}
