/** Frame sampling: M equally spaced positions over the available
 * frames, endpoints included. When fewer than M frames exist the
 * positions repeat, so every caption still references a sampled frame. */

export function equallySpacedIndices(frameCount: number, m: number): number[] {
  if (frameCount < 1) throw new Error('no frames to sample');
  if (m < 1) throw new Error('must sample at least one frame');
  if (m === 1) return [Math.floor((frameCount - 1) / 2)];
  const out: number[] = [];
  for (let i = 0; i < m; i++) {
    out.push(Math.round((i * (frameCount - 1)) / (m - 1)));
  }
  return out;
}
