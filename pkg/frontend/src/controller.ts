// Headless editor logic: panels delegate here, and the UI-contract tests
// drive this class against a stubbed service. The UI never computes model
// math locally; every displayed image and probability is a service response.

import { ApiClient, type EditResponse, type LatentHandle } from "./api.js";
import { RequestScheduler } from "./scheduler.js";
import {
  type SessionState,
  emptySession,
  exportSession,
  importSession,
} from "./session.js";

export interface Display {
  image: string | null;
  zProbs: number[] | null;
}

export class EditorController {
  session: SessionState;
  attributeNames: string[] = [];
  epsilons: Record<string, number> = {};
  onDisplay: (display: Display) => void = () => undefined;
  onMixDisplay: (image: string | null, audit: { y_probs: number[]; z_probs: number[] } | null) => void =
    () => undefined;

  constructor(
    private api: ApiClient,
    private scheduler = new RequestScheduler(120),
  ) {
    this.session = emptySession([]);
  }

  async init(): Promise<void> {
    const attrs = await this.api.attributes();
    this.attributeNames = attrs.names;
    this.epsilons = attrs.epsilons;
    this.session = emptySession(attrs.names);
  }

  entry(imageId: string) {
    const found = this.session.images.find((e) => e.imageId === imageId);
    if (!found) throw new Error(`image ${imageId} is not part of the session`);
    return found;
  }

  async addImage(imageB64: string): Promise<string> {
    const encoded = await this.api.encode(imageB64);
    if (!this.session.images.some((e) => e.imageId === encoded.image_id)) {
      this.session.images.push({
        imageId: encoded.image_id,
        imageB64,
        latents: { h_y: encoded.h_y, h_z: encoded.h_z },
        yProbs: encoded.y_probs,
        zProbs: encoded.z_probs,
      });
    }
    return encoded.image_id;
  }

  async select(imageId: string): Promise<void> {
    this.entry(imageId);
    this.session.selected = imageId;
    for (const name of this.attributeNames) this.session.sliders[name] = 0;
    await this.renderSelected();
  }

  /** Apply the full slider vector to the base latents (one chained pass in
   * a stable attribute order, so composition order never matters) and
   * display the final decode. */
  async renderSelected(): Promise<Display | null> {
    if (!this.session.selected) return null;
    const base = this.entry(this.session.selected);
    const active = this.attributeNames.filter((n) => this.session.sliders[n] !== 0);
    if (active.length === 0) {
      const recon = await this.api.reconstruct(base.imageId);
      const display = { image: recon.image, zProbs: base.zProbs };
      this.applyDisplay(display);
      return display;
    }
    let latents: LatentHandle = base.latents;
    let last: EditResponse | null = null;
    for (const name of active) {
      last = await this.api.edit({ latents }, name, this.session.sliders[name]);
      latents = last.latents;
    }
    const display = { image: last!.image, zProbs: last!.z_probs };
    this.applyDisplay(display);
    return display;
  }

  private applyDisplay(display: Display): void {
    this.session.displayedImage = display.image;
    this.session.displayedZProbs = display.zProbs;
    this.onDisplay(display);
  }

  /** Debounced slider move; resolves null when superseded by newer input. */
  setSlider(attribute: string, epsilon: number): Promise<Display | null> {
    this.session.sliders[attribute] = epsilon;
    return this.scheduler.schedule(attribute, async () => {
      const display = await this.renderSelected();
      return display;
    });
  }

  async setMixSlot(slot: "identity" | "attributes", imageId: string): Promise<void> {
    this.entry(imageId);
    this.session.mix[slot] = imageId;
    await this.renderMix();
  }

  async swapMix(): Promise<void> {
    const { identity, attributes } = this.session.mix;
    this.session.mix = { identity: attributes, attributes: identity };
    await this.renderMix();
  }

  async renderMix(): Promise<void> {
    const { identity, attributes } = this.session.mix;
    if (!identity || !attributes) {
      this.onMixDisplay(null, null);
      return;
    }
    const mixed = await this.api.mix(identity, attributes);
    this.onMixDisplay(mixed.image, mixed.audit);
  }

  /** Confirm the current slider magnitude as the attribute's flip
   * threshold; persisted by the service and reused by later flips. */
  async calibrate(attribute: string): Promise<number> {
    const value = Math.abs(this.session.sliders[attribute] ?? 0);
    if (value === 0) throw new Error("move the slider before pinning a flip threshold");
    const saved = await this.api.calibrate(attribute, value);
    this.session.pinned[attribute] = saved.epsilon;
    this.epsilons[attribute] = saved.epsilon;
    return saved.epsilon;
  }

  async resetCalibration(attribute: string): Promise<number> {
    const saved = await this.api.calibrate(attribute, null);
    delete this.session.pinned[attribute];
    this.epsilons[attribute] = saved.epsilon;
    return saved.epsilon;
  }

  exportSession(): string {
    return exportSession(this.session);
  }

  /** Restore a session and replay the displayed render through the
   * service; with the deterministic backend the displayed PNG is
   * bit-identical to the exported one. */
  async importSession(payload: string): Promise<Display | null> {
    this.scheduler.cancelAll();
    this.session = importSession(payload);
    if (this.session.selected) {
      return this.renderSelected();
    }
    return null;
  }
}
