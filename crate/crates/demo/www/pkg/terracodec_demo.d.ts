/* tslint:disable */
/* eslint-disable */

export function cloudFractions(seed: number, cloud_prob: number): Float64Array;

export function coderReport(mu: number, sigma: number, n: number, seed: number): string;

export function frameRgba(seed: number, cloud_prob: number, frame: number, clear: boolean): Uint8Array;

export function frames(): number;

export function side(): number;

export function tokenLayout(d_lat: number, budget: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cloudFractions: (a: number, b: number) => [number, number];
    readonly coderReport: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly frameRgba: (a: number, b: number, c: number, d: number) => [number, number];
    readonly frames: () => number;
    readonly side: () => number;
    readonly tokenLayout: (a: number, b: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
