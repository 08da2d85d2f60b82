/* tslint:disable */
/* eslint-disable */

/**
 * A compact GCG classifier living in the page.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Overlay of the attention `channel` ("gate" or "spatial_map") on
     * the image `synthesize(class, seed)`, as RGBA.
     */
    explain(_class: number, seed: bigint, channel: string): Uint8Array;
    constructor(seed: bigint);
    /**
     * Class probabilities from the last `explain` call.
     */
    probs(): Float64Array;
    /**
     * Trains from scratch on a fresh synthetic set and keeps the best
     * epoch. Returns its validation accuracy.
     */
    train(epochs: number): number;
}

/**
 * RGBA pixels (`VIEW_SIZE` square) of one synthetic image.
 */
export function synthesize(_class: number, seed: bigint): Uint8Array;

export function view_size(): number;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_explain: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
    readonly demo_new: (a: bigint) => [number, number, number];
    readonly demo_probs: (a: number) => [number, number];
    readonly demo_train: (a: number, b: number) => [number, number, number];
    readonly synthesize: (a: number, b: bigint) => [number, number];
    readonly view_size: () => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
