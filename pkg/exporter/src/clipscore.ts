/** Cross-modal caption score: 2.5 * max(cosine, 0), computed in double
 * precision from the float32 values that land on disk, so the engine
 * consuming the tables recomputes the same number. */

export function cosine(a: Float32Array, b: Float32Array): number {
  if (a.length !== b.length) {
    throw new Error(`dimension mismatch: ${a.length} vs ${b.length}`);
  }
  let dot = 0;
  let na = 0;
  let nb = 0;
  for (let i = 0; i < a.length; i++) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na === 0 || nb === 0) throw new Error('zero-norm vector');
  return dot / (Math.sqrt(na) * Math.sqrt(nb));
}

export function clipScore(imageEmb: Float32Array, textEmb: Float32Array): number {
  return 2.5 * Math.max(cosine(imageEmb, textEmb), 0);
}
