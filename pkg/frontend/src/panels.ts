// DOM wiring: thin layer over EditorController. All state lives in the
// controller/session; this file only builds elements and forwards events.

import { ApiClient, ApiError } from "./api.js";
import { EditorController } from "./controller.js";
import { clampSlider, exportCalibration } from "./session.js";

const OVERSHOOT = 3; // sliders reach 3x the calibrated magnitude

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) node.setAttribute(key, value);
  for (const child of children) node.append(child);
  return node;
}

function pngUrl(b64: string): string {
  return `data:image/png;base64,${b64}`;
}

export class App {
  private controller: EditorController;
  private banner = el("div", { class: "banner hidden" });
  private sliderInputs = new Map<string, HTMLInputElement>();
  private readouts = new Map<string, HTMLElement>();
  private editImage = el("img", { class: "preview", alt: "edited reconstruction" });
  private mixImage = el("img", { class: "preview", alt: "mixed image" });
  private mixAudit = el("pre", { class: "audit" });
  private gallery = el("div", { class: "gallery" });
  private root: HTMLElement;

  constructor(root: HTMLElement, api = new ApiClient()) {
    this.root = root;
    this.controller = new EditorController(api);
    this.controller.onDisplay = (display) => {
      if (display.image) this.editImage.src = pngUrl(display.image);
      display.zProbs?.forEach((p, i) => {
        const name = this.controller.attributeNames[i];
        const readout = this.readouts.get(name);
        if (readout) readout.textContent = `${name}: ${p.toFixed(3)}`;
      });
    };
    this.controller.onMixDisplay = (image, audit) => {
      if (image) this.mixImage.src = pngUrl(image);
      this.mixAudit.textContent = audit
        ? `audit y: [${audit.y_probs.map((p) => p.toFixed(2)).join(", ")}]\n` +
          `audit z: [${audit.z_probs.map((p) => p.toFixed(2)).join(", ")}]`
        : "";
    };
  }

  async start(): Promise<void> {
    try {
      await this.controller.init();
      this.banner.classList.add("hidden");
      this.build();
    } catch (err) {
      this.showBanner(err);
    }
  }

  private showBanner(err: unknown): void {
    const reason = err instanceof ApiError ? `${err.status}: ${err.message}` : String(err);
    this.banner.textContent = `service unavailable (${reason}) `;
    const retry = el("button", {}, ["retry"]);
    retry.onclick = () => void this.start();
    this.banner.append(retry);
    this.banner.classList.remove("hidden");
    this.root.prepend(this.banner);
    for (const input of this.sliderInputs.values()) input.disabled = true;
  }

  private build(): void {
    this.root.replaceChildren(this.banner);
    const picker = el("input", { type: "file", accept: "image/png" }) as HTMLInputElement;
    picker.onchange = async () => {
      const file = picker.files?.[0];
      if (!file) return;
      const b64 = await fileToBase64(file);
      try {
        const id = await this.controller.addImage(b64);
        this.addThumbnail(id, b64);
        await this.controller.select(id);
      } catch (err) {
        this.showBanner(err);
      }
    };

    const sliders = el("div", { class: "sliders" });
    for (const name of this.controller.attributeNames) {
      const epsStar = this.controller.epsilons[name] ?? 1;
      const input = el("input", {
        type: "range",
        min: String(-OVERSHOOT * epsStar),
        max: String(OVERSHOOT * epsStar),
        step: String(epsStar / 50),
        value: "0",
      }) as HTMLInputElement;
      input.oninput = () => {
        const value = clampSlider(Number(input.value), epsStar, OVERSHOOT);
        void this.controller.setSlider(name, value).catch((err) => this.showBanner(err));
      };
      this.sliderInputs.set(name, input);
      const readout = el("span", { class: "readout" }, [`${name}: -`]);
      this.readouts.set(name, readout);
      const pin = el("button", { title: "pin current magnitude as the flip threshold" }, ["pin"]);
      pin.onclick = () => void this.controller.calibrate(name).catch((err) => this.showBanner(err));
      const reset = el("button", {}, ["reset"]);
      reset.onclick = () => void this.controller.resetCalibration(name).catch((err) => this.showBanner(err));
      sliders.append(el("div", { class: "slider-row" }, [readout, input, pin, reset]));
    }

    const exportButton = el("button", {}, ["export session"]);
    exportButton.onclick = () => download("session.json", this.controller.exportSession());
    const exportCalib = el("button", {}, ["export calibration"]);
    exportCalib.onclick = () => download("calibration.json", exportCalibration(this.controller.session.pinned));
    const importInput = el("input", { type: "file", accept: "application/json" }) as HTMLInputElement;
    importInput.onchange = async () => {
      const file = importInput.files?.[0];
      if (!file) return;
      await this.controller.importSession(await file.text()).catch((err) => this.showBanner(err));
      this.gallery.replaceChildren();
      for (const entry of this.controller.session.images) this.addThumbnail(entry.imageId, entry.imageB64);
    };

    const identitySlot = el("select", { class: "mix-slot" }) as HTMLSelectElement;
    const attributeSlot = el("select", { class: "mix-slot" }) as HTMLSelectElement;
    const refreshSlots = () => {
      for (const slot of [identitySlot, attributeSlot]) {
        slot.replaceChildren(el("option", { value: "" }, ["(pick)"]));
        for (const entry of this.controller.session.images) {
          slot.append(el("option", { value: entry.imageId }, [entry.imageId.slice(0, 8)]));
        }
      }
    };
    this.galleryChanged = refreshSlots;
    identitySlot.onchange = () =>
      identitySlot.value && void this.controller.setMixSlot("identity", identitySlot.value);
    attributeSlot.onchange = () =>
      attributeSlot.value && void this.controller.setMixSlot("attributes", attributeSlot.value);
    const swap = el("button", {}, ["swap"]);
    swap.onclick = () => void this.controller.swapMix();

    this.root.append(
      el("section", {}, [el("h2", {}, ["images"]), picker, this.gallery]),
      el("section", {}, [el("h2", {}, ["edit"]), this.editImage, sliders]),
      el("section", {}, [
        el("h2", {}, ["mix"]),
        el("div", {}, ["identity: ", identitySlot, " attributes: ", attributeSlot, swap]),
        this.mixImage,
        this.mixAudit,
      ]),
      el("section", {}, [el("h2", {}, ["session"]), exportButton, exportCalib, importInput]),
    );
    refreshSlots();
  }

  private galleryChanged: () => void = () => undefined;

  private addThumbnail(imageId: string, b64: string): void {
    const img = el("img", { class: "thumb", src: pngUrl(b64), title: imageId });
    img.onclick = () => void this.controller.select(imageId);
    this.gallery.append(img);
    this.galleryChanged();
  }
}

function fileToBase64(file: File): Promise<string> {
  return new Promise((resolve, reject) => {
    const reader = new FileReader();
    reader.onload = () => resolve(String(reader.result).split(",", 2)[1]);
    reader.onerror = () => reject(reader.error);
    reader.readAsDataURL(file);
  });
}

function download(name: string, text: string): void {
  const link = el("a", {
    href: `data:application/json;charset=utf-8,${encodeURIComponent(text)}`,
    download: name,
  });
  link.click();
}
