/* tslint:disable */
/* eslint-disable */

/**
 * A synthesized single-integrator grid around a circular obstacle at the
 * origin, on `[-10, 10]^2`.
 */
export class Scene {
    free(): void;
    [Symbol.dispose](): void;
    capital_lambda(): number;
    /**
     * `h` at the nodes, same layout as [`Scene::values`].
     */
    constraint_values(): Float64Array;
    /**
     * Polylines of the `level` set as `[[[x, y], ...], ...]`.
     */
    contour(level: number): string;
    /**
     * `nodes` per axis; `forward_only` restricts the x-velocity to `[1, 2]`.
     */
    constructor(nodes: number, radius: number, gamma: number, forward_only: boolean);
    nodes(): number;
    /**
     * Closed loop tracking the line `y = line_y` from `(x0, y0)`. With
     * `tau_p > 0` the value function is shifted by the sinusoid with
     * `r = radius` and amplitude `r_max`; otherwise it is used unshifted.
     */
    simulate(x0: number, y0: number, line_y: number, cruise: number, tau_p: number, r_max: number, t_end: number): string;
    /**
     * Node values, last axis fastest.
     */
    values(): Float64Array;
}

/**
 * `lambda(t)`, `lambda'(t)` and `alpha(-lambda(t))` over `[0, horizon]` for
 * a sinusoid schedule, the class-K_e function on `[-2r, r]`, and the
 * shiftability verdict against `capital_lambda`.
 */
export function shift_curves(c: number, gamma: number, r: number, r_max: number, tau_p: number, sigma: number, capital_lambda: number, horizon: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_scene_free: (a: number, b: number) => void;
    readonly scene_capital_lambda: (a: number) => number;
    readonly scene_constraint_values: (a: number) => [number, number];
    readonly scene_contour: (a: number, b: number) => [number, number, number, number];
    readonly scene_new: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly scene_nodes: (a: number) => number;
    readonly scene_simulate: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
    readonly scene_values: (a: number) => [number, number];
    readonly shift_curves: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number, number];
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
