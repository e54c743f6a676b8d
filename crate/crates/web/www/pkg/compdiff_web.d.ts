/* tslint:disable */
/* eslint-disable */

export class WebDemo {
    free(): void;
    [Symbol.dispose](): void;
    alphaBarCurve(): Float64Array;
    conceptNames(): string[];
    fieldGrid(spec: string, t: number, n: number, lo: number, hi: number): Float64Array;
    /**
     * Builds from a TOML experiment config, or the built-in one when empty.
     */
    constructor(config?: string | null);
    sample(spec: string, n: number, seed: number): Float64Array;
    steps(): number;
}

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_webdemo_free: (a: number, b: number) => void;
    readonly webdemo_alphaBarCurve: (a: number) => [number, number];
    readonly webdemo_conceptNames: (a: number) => [number, number];
    readonly webdemo_fieldGrid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly webdemo_new: (a: number, b: number) => [number, number, number];
    readonly webdemo_sample: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly webdemo_steps: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
