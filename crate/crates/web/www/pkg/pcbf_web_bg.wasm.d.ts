/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_scene_free: (a: number, b: number) => void;
export const scene_capital_lambda: (a: number) => number;
export const scene_constraint_values: (a: number) => [number, number];
export const scene_contour: (a: number, b: number) => [number, number, number, number];
export const scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
export const scene_nodes: (a: number) => number;
export const scene_simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const scene_values: (a: number) => [number, number];
export const shift_curves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_start: () => void;
