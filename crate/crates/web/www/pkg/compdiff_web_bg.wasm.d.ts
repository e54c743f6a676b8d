/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_webdemo_free: (a: number, b: number) => void;
export const webdemo_alphaBarCurve: (a: number) => [number, number];
export const webdemo_conceptNames: (a: number) => [number, number];
export const webdemo_fieldGrid: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
export const webdemo_new: (a: number, b: number) => [number, number, number];
export const webdemo_sample: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const webdemo_steps: (a: number) => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
