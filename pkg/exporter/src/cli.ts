#!/usr/bin/env node
/** capvid-export CLI: `export --videos LIST --captions LIST --out DIR`. */
import * as fs from 'fs';

import { makeEncoder } from './encoder';
import { CaptionSource, ExportJob, QuerySource, runExport, VideoSource } from './exporter';

function usage(): never {
  console.error(
    'usage: capvid-export export --videos videos.json --captions captions.json\n' +
    '                            [--queries queries.json] [--frames-per-video M]\n' +
    '                            [--encoder hash-<dim>] [--name NAME] --out DIR');
  process.exit(2);
}

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    const value = argv[i + 1];
    if (!key.startsWith('--') || value === undefined) usage();
    flags.set(key.slice(2), value);
  }
  return flags;
}

function readJson<T>(file: string): T {
  return JSON.parse(fs.readFileSync(file, 'utf-8')) as T;
}

export function main(argv: string[]): number {
  if (argv[0] !== 'export') usage();
  const flags = parseFlags(argv.slice(1));
  const videosFile = flags.get('videos');
  const captionsFile = flags.get('captions');
  const outDir = flags.get('out');
  if (!videosFile || !captionsFile || !outDir) usage();

  const job: ExportJob = {
    videos: readJson<VideoSource[]>(videosFile),
    captions: readJson<CaptionSource[]>(captionsFile),
    queries: flags.has('queries') ? readJson<QuerySource[]>(flags.get('queries')!) : [],
    framesPerVideo: parseInt(flags.get('frames-per-video') ?? '10', 10),
    encoder: makeEncoder(flags.get('encoder') ?? 'hash-32'),
    outDir,
    datasetName: flags.get('name'),
  };
  const summary = runExport(job);
  console.error(
    `exported ${summary.videos} videos, ${summary.captions} captions, ` +
    `${summary.queries} queries -> ${summary.outDir}` +
    (summary.skipped.length ? ` (skipped: ${summary.skipped.join(', ')})` : ''));
  return 0;
}

if (require.main === module) {
  try {
    process.exit(main(process.argv.slice(2)));
  } catch (err) {
    console.error(`export failed: ${(err as Error).message}`);
    process.exit(1);
  }
}
