/**
 * EMB1 binary embedding tables (bit-exact layout):
 *
 *   bytes 0-3    magic ASCII "EMB1"
 *   bytes 4-7    u32 LE version (= 1)
 *   bytes 8-11   u32 LE row_count
 *   bytes 12-15  u32 LE dim
 *   then         row_count * dim float32 LE, row-major
 */

export const EMB1_MAGIC = 'EMB1';
export const EMB1_VERSION = 1;
const HEADER_BYTES = 16;

export function encodeTable(rows: Float32Array[], dim: number): Buffer {
  for (const row of rows) {
    if (row.length !== dim) {
      throw new Error(`row has ${row.length} values, expected ${dim}`);
    }
    for (const v of row) {
      if (!Number.isFinite(v)) throw new Error('non-finite embedding value');
    }
  }
  const buf = Buffer.alloc(HEADER_BYTES + 4 * rows.length * dim);
  buf.write(EMB1_MAGIC, 0, 'ascii');
  buf.writeUInt32LE(EMB1_VERSION, 4);
  buf.writeUInt32LE(rows.length, 8);
  buf.writeUInt32LE(dim, 12);
  let offset = HEADER_BYTES;
  for (const row of rows) {
    for (const v of row) {
      buf.writeFloatLE(v, offset);
      offset += 4;
    }
  }
  return buf;
}

export function decodeTable(buf: Buffer): { dim: number; rows: Float32Array[] } {
  if (buf.length < HEADER_BYTES) throw new Error('truncated EMB1 header');
  if (buf.toString('ascii', 0, 4) !== EMB1_MAGIC) throw new Error('bad EMB1 magic');
  if (buf.readUInt32LE(4) !== EMB1_VERSION) throw new Error('bad EMB1 version');
  const rowCount = buf.readUInt32LE(8);
  const dim = buf.readUInt32LE(12);
  const expected = HEADER_BYTES + 4 * rowCount * dim;
  if (buf.length !== expected) {
    throw new Error(`expected ${expected} bytes, got ${buf.length}`);
  }
  const rows: Float32Array[] = [];
  let offset = HEADER_BYTES;
  for (let r = 0; r < rowCount; r++) {
    const row = new Float32Array(dim);
    for (let k = 0; k < dim; k++) {
      row[k] = buf.readFloatLE(offset);
      offset += 4;
    }
    rows.push(row);
  }
  return { dim, rows };
}
