import assert from 'node:assert/strict';
import { test } from 'node:test';

import { clipScore, cosine } from '../src/clipscore';

test('identical vectors score 2.5', () => {
  const v = new Float32Array([0.6, 0.8]);
  assert.ok(Math.abs(clipScore(v, v) - 2.5) < 1e-12);
});

test('orthogonal vectors score 0', () => {
  assert.equal(clipScore(new Float32Array([1, 0]), new Float32Array([0, 1])), 0);
});

test('opposite vectors clamp to 0', () => {
  assert.equal(clipScore(new Float32Array([1, 0]), new Float32Array([-1, 0])), 0);
});

test('cosine is scale invariant', () => {
  const a = new Float32Array([0.3, -0.2, 0.9]);
  const b = new Float32Array([-0.5, 0.1, 0.4]);
  const scaled = new Float32Array(a.map((v) => Math.fround(4 * v)));
  assert.ok(Math.abs(cosine(a, b) - cosine(scaled, b)) < 1e-6);
});

test('zero-norm input is rejected', () => {
  assert.throws(() => cosine(new Float32Array([0, 0]), new Float32Array([1, 0])),
    /zero-norm/);
});

test('dimension mismatch is rejected', () => {
  assert.throws(() => cosine(new Float32Array([1]), new Float32Array([1, 0])),
    /mismatch/);
});
