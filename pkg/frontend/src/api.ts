// Typed client for the latent-editing service. Every number the UI shows
// comes from one of these responses.

export interface LatentHandle {
  h_y: number[];
  h_z: number[];
}

export interface EncodeResponse {
  image_id: string;
  h_y: number[];
  h_z: number[];
  y_probs: number[];
  z_probs: number[];
}

export interface EditResponse {
  image: string; // base64 PNG
  z_probs: number[];
  latents: LatentHandle;
}

export interface MixResponse {
  image: string;
  audit: { y_probs: number[]; z_probs: number[] };
}

export interface AttributesResponse {
  names: string[];
  epsilons: Record<string, number>;
  defaults: Record<string, number>;
}

export interface HealthResponse {
  status: string;
  checkpoint_id?: string;
  uptime_s?: number;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl = "",
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const body = await response.json();
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // keep the status text
      }
      throw new ApiError(response.status, detail);
    }
    return (await response.json()) as T;
  }

  private post<T>(path: string, payload: unknown, signal?: AbortSignal): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(payload),
      signal,
    });
  }

  health(): Promise<HealthResponse> {
    return this.request<HealthResponse>("/health");
  }

  attributes(): Promise<AttributesResponse> {
    return this.request<AttributesResponse>("/attributes");
  }

  encode(imageB64: string): Promise<EncodeResponse> {
    return this.post<EncodeResponse>("/encode", { image: imageB64 });
  }

  reconstruct(imageId: string): Promise<{ image: string }> {
    return this.post<{ image: string }>("/reconstruct", { image_id: imageId });
  }

  edit(
    source: { imageId?: string; latents?: LatentHandle },
    attribute: string | number,
    epsilon: number,
    signal?: AbortSignal,
  ): Promise<EditResponse> {
    return this.post<EditResponse>(
      "/edit",
      { image_id: source.imageId, latents: source.latents, attribute, epsilon },
      signal,
    );
  }

  mix(identityImageId: string, attributeImageId: string): Promise<MixResponse> {
    return this.post<MixResponse>("/mix", {
      identity_image_id: identityImageId,
      attribute_image_id: attributeImageId,
    });
  }

  calibrate(attribute: string, epsilon: number | null): Promise<{ attribute: string; epsilon: number }> {
    return this.post<{ attribute: string; epsilon: number }>("/calibrate", {
      attribute,
      epsilon,
    });
  }
}
