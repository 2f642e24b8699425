import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { StubService } from "./stub.js";

describe("api client", () => {
  it("maps service errors to ApiError with the status and detail", async () => {
    const stub = new StubService();
    const api = new ApiClient("", stub.fetch);
    await expect(api.encode("!broken")).rejects.toMatchObject({ status: 400 });
    await expect(api.reconstruct("missing")).rejects.toBeInstanceOf(ApiError);
    await expect(api.edit({ imageId: "missing" }, 0, 1)).rejects.toMatchObject({ status: 404 });
  });

  it("surfaces 503 before a checkpoint is loaded", async () => {
    const stub = new StubService();
    stub.healthy = false;
    const api = new ApiClient("", stub.fetch);
    await expect(api.attributes()).rejects.toMatchObject({ status: 503 });
  });

  it("unknown attributes are 422", async () => {
    const stub = new StubService();
    const api = new ApiClient("", stub.fetch);
    const encoded = await api.encode("img");
    await expect(api.edit({ imageId: encoded.image_id }, "frown", 1)).rejects.toMatchObject({
      status: 422,
    });
    await expect(api.calibrate("frown", 1)).rejects.toMatchObject({ status: 422 });
  });

  it("round-trips latent handles through edit", async () => {
    const stub = new StubService();
    const api = new ApiClient("", stub.fetch);
    const encoded = await api.encode("img2");
    const one = await api.edit({ imageId: encoded.image_id }, 0, 0.5);
    const viaHandle = await api.edit({ latents: one.latents }, 0, 0.5);
    const direct = await api.edit({ imageId: encoded.image_id }, 0, 1.0);
    expect(viaHandle.image).toBe(direct.image);
  });

  it("same payload gets the same content-hash id", async () => {
    const stub = new StubService();
    const api = new ApiClient("", stub.fetch);
    const a = await api.encode("same-bytes");
    const b = await api.encode("same-bytes");
    expect(a.image_id).toBe(b.image_id);
  });
});
