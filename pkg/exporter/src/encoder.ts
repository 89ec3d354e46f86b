/**
 * Embedding backends. Real CLIP-style checkpoints plug in behind the
 * Encoder interface (embed a frame image / a caption text to a fixed
 * dimension); the bundled HashEncoder is a fully deterministic stand-in
 * that needs no model weights, so pipelines and parity checks run
 * anywhere.
 */
import { createHash } from 'crypto';

export interface Encoder {
  readonly id: string;
  readonly dim: number;
  embedImage(content: Buffer): Float32Array;
  embedText(text: string): Float32Array;
}

function hashToUnitVector(seedParts: string[], content: Buffer, dim: number): Float32Array {
  const base = createHash('sha256');
  for (const part of seedParts) base.update(part);
  base.update(content);
  const seed = base.digest();
  const out = new Float32Array(dim);
  let norm = 0;
  let block = Buffer.alloc(0);
  let cursor = 0;
  let counter = 0;
  for (let i = 0; i < dim; i++) {
    if (cursor + 8 > block.length) {
      block = createHash('sha256').update(seed).update(String(counter++)).digest();
      cursor = 0;
    }
    // two u32 words -> approximately standard normal via Box-Muller
    const u1 = (block.readUInt32LE(cursor) + 1) / 4294967297;
    const u2 = block.readUInt32LE(cursor + 4) / 4294967296;
    cursor += 8;
    out[i] = Math.fround(Math.sqrt(-2 * Math.log(u1)) * Math.cos(2 * Math.PI * u2));
    norm += out[i] * out[i];
  }
  norm = Math.sqrt(norm);
  for (let i = 0; i < dim; i++) out[i] = Math.fround(out[i] / norm);
  return out;
}

/** Deterministic content-hash embeddings; same bytes -> same row. */
export class HashEncoder implements Encoder {
  readonly id: string;
  readonly dim: number;

  constructor(dim = 32) {
    this.dim = dim;
    this.id = `hash-v1-d${dim}`;
  }

  embedImage(content: Buffer): Float32Array {
    return hashToUnitVector([this.id, 'image:'], content, this.dim);
  }

  embedText(text: string): Float32Array {
    return hashToUnitVector([this.id, 'text:'], Buffer.from(text, 'utf-8'), this.dim);
  }
}

export function makeEncoder(spec: string): Encoder {
  const match = /^hash-(\d+)$/.exec(spec);
  if (match) return new HashEncoder(parseInt(match[1], 10));
  if (spec === 'hash') return new HashEncoder();
  throw new Error(`unknown encoder ${spec} (expected hash or hash-<dim>)`);
}
