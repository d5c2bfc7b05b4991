/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const cloudFractions: (a: number, b: number) => [number, number];
export const coderReport: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const frameRgba: (a: number, b: number, c: number, d: number) => [number, number];
export const frames: () => number;
export const side: () => number;
export const tokenLayout: (a: number, b: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
