/* tslint:disable */
/* eslint-disable */

export class DemoApp {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON [`FitSummary`].
     */
    fit(p: number, epochs: number, warm: boolean, seed: number): string;
    constructor();
    preview(view: number): Uint8Array;
    preview_height(): number;
    preview_width(): number;
    set_scene(bend: number, radius: number): void;
    views(): number;
    /**
     * JSON [`WarmStartSummary`].
     */
    warm_start(): string;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demoapp_free: (a: number, b: number) => void;
    readonly demoapp_fit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demoapp_new: () => [number, number, number];
    readonly demoapp_preview: (a: number, b: number) => [number, number, number, number];
    readonly demoapp_preview_height: (a: number) => number;
    readonly demoapp_preview_width: (a: number) => number;
    readonly demoapp_set_scene: (a: number, b: number, c: number) => [number, number];
    readonly demoapp_views: (a: number) => number;
    readonly demoapp_warm_start: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
