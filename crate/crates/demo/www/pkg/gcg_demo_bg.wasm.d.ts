/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_explain: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
export const demo_new: (a: bigint) => [number, number, number];
export const demo_probs: (a: number) => [number, number];
export const demo_train: (a: number, b: number) => [number, number, number];
export const synthesize: (a: number, b: bigint) => [number, number];
export const view_size: () => number;
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
