// Debounced, cancellable request scheduling for slider input. Each key
// (attribute) keeps at most one pending and one in-flight task; newer input
// aborts the in-flight request for the same key. The trailing debounce
// keeps the request rate at or under 1000/delayMs per key.

export type Task<T> = (signal: AbortSignal) => Promise<T>;

interface Entry {
  timer: ReturnType<typeof setTimeout> | null;
  controller: AbortController | null;
  generation: number;
  dropPending: (() => void) | null;
}

export class RequestScheduler {
  private entries = new Map<string, Entry>();

  constructor(private delayMs = 120) {}

  /** Schedule `task` for `key`, replacing any pending or in-flight task.
   * Resolves with the task result, or null when superseded/aborted. */
  schedule<T>(key: string, task: Task<T>): Promise<T | null> {
    const entry =
      this.entries.get(key) ?? { timer: null, controller: null, generation: 0, dropPending: null };
    this.entries.set(key, entry);
    entry.generation += 1;
    const generation = entry.generation;
    if (entry.timer !== null) clearTimeout(entry.timer);
    entry.timer = null;
    entry.dropPending?.();
    entry.dropPending = null;
    if (entry.controller !== null) entry.controller.abort();
    entry.controller = null;

    return new Promise((resolve, reject) => {
      entry.dropPending = () => resolve(null);
      entry.timer = setTimeout(async () => {
        entry.timer = null;
        entry.dropPending = null;
        if (generation !== entry.generation) {
          resolve(null);
          return;
        }
        const controller = new AbortController();
        entry.controller = controller;
        try {
          const result = await task(controller.signal);
          resolve(generation === entry.generation ? result : null);
        } catch (err) {
          if (controller.signal.aborted) resolve(null);
          else reject(err);
        } finally {
          if (entry.controller === controller) entry.controller = null;
        }
      }, this.delayMs);
    });
  }

  cancel(key: string): void {
    const entry = this.entries.get(key);
    if (!entry) return;
    entry.generation += 1;
    if (entry.timer !== null) clearTimeout(entry.timer);
    entry.timer = null;
    entry.dropPending?.();
    entry.dropPending = null;
    if (entry.controller !== null) entry.controller.abort();
    entry.controller = null;
  }

  cancelAll(): void {
    for (const key of this.entries.keys()) this.cancel(key);
  }
}
