// Editor session state: selected images, base latents, slider vector,
// pinned edit magnitudes, mix slots. Serializable so a session re-opens
// exactly (the displayed render is replayed through the service).

import type { LatentHandle } from "./api.js";

export interface ImageEntry {
  imageId: string;
  imageB64: string; // original upload, so a restored session can re-encode
  latents: LatentHandle;
  yProbs: number[];
  zProbs: number[];
}

export interface SessionState {
  images: ImageEntry[];
  selected: string | null;
  sliders: Record<string, number>; // attribute name -> epsilon
  pinned: Record<string, number>; // attribute name -> confirmed flip magnitude
  mix: { identity: string | null; attributes: string | null };
  displayedImage: string | null;
  displayedZProbs: number[] | null;
}

export const SESSION_FORMAT = 1;

export function emptySession(attributeNames: string[]): SessionState {
  const sliders: Record<string, number> = {};
  for (const name of attributeNames) sliders[name] = 0;
  return {
    images: [],
    selected: null,
    sliders,
    pinned: {},
    mix: { identity: null, attributes: null },
    displayedImage: null,
    displayedZProbs: null,
  };
}

export function clampSlider(value: number, epsilonStar: number, overshoot = 3): number {
  const bound = overshoot * Math.max(epsilonStar, 1e-6);
  return Math.min(bound, Math.max(-bound, value));
}

export function exportSession(state: SessionState): string {
  return JSON.stringify({ format: SESSION_FORMAT, state });
}

export function importSession(payload: string): SessionState {
  const parsed = JSON.parse(payload) as { format?: number; state?: SessionState };
  if (parsed.format !== SESSION_FORMAT || !parsed.state) {
    throw new Error(`unsupported session payload (format ${parsed.format})`);
  }
  return parsed.state;
}

// Calibration file shared with the command-line augment run: a flat
// attribute-name -> epsilon object.
export function exportCalibration(pinned: Record<string, number>): string {
  const sorted: Record<string, number> = {};
  for (const key of Object.keys(pinned).sort()) sorted[key] = pinned[key];
  return JSON.stringify(sorted, null, 2);
}
