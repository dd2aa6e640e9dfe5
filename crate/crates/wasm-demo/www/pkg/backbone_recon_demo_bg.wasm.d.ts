/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demoapp_free: (a: number, b: number) => void;
export const demoapp_fit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demoapp_new: () => [number, number, number];
export const demoapp_preview: (a: number, b: number) => [number, number, number, number];
export const demoapp_preview_height: (a: number) => number;
export const demoapp_preview_width: (a: number) => number;
export const demoapp_set_scene: (a: number, b: number, c: number) => [number, number];
export const demoapp_views: (a: number) => number;
export const demoapp_warm_start: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
