/* tslint:disable */
/* eslint-disable */

/**
 * Real-time world stepped from JavaScript, one state line per frame.
 */
export class Sandbox {
    free(): void;
    [Symbol.dispose](): void;
    constructor(seed: bigint);
    /**
     * Moves the ball, keeping the robot where it is.
     */
    place_ball(x: number, y: number): void;
    /**
     * `open_field`, `dribble_to_target` or `obstacle_avoidance`.
     */
    reset(scenario: string): void;
    /**
     * Ball-velocity command, m/s; clamped to the command limit.
     */
    set_command(vx: number, vy: number): void;
    /**
     * The same state line the tele-operation server streams.
     */
    state_json(): string;
    /**
     * Advances `n` control steps. The scenario restarts when an episode ends
     * or the task is decided.
     */
    step(n: number): void;
    time(): number;
}

export function ball_in_view(x: number, y: number, yaw: number, head_pan: number, head_tilt: number, fov_scale: number, bx: number, by: number): boolean;

/**
 * Fits a line to points `[..=split]` and another to points `[split + skip..]`
 * of a flat `[x0, y0, ...]` polyline. Returns `[angle_deg, c1x, c1y, d1x, d1y,
 * c2x, c2y, d2x, d2y]` with centroids `c` and unit directions `d`; the angle is
 * counter-clockwise positive.
 */
export function fit_turn(points: Float64Array, split: number, skip: number): Float64Array;

/**
 * Ground footprint of the camera view as flat `[x0, y0, x1, y1, ...]`.
 */
export function fov_footprint(x: number, y: number, yaw: number, head_pan: number, head_tilt: number, fov_scale: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_sandbox_free: (a: number, b: number) => void;
    readonly ball_in_view: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => number;
    readonly fit_turn: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly fov_footprint: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number];
    readonly sandbox_new: (a: bigint) => [number, number, number];
    readonly sandbox_place_ball: (a: number, b: number, c: number) => [number, number];
    readonly sandbox_reset: (a: number, b: number, c: number) => [number, number];
    readonly sandbox_set_command: (a: number, b: number, c: number) => void;
    readonly sandbox_state_json: (a: number) => [number, number];
    readonly sandbox_step: (a: number, b: number) => [number, number];
    readonly sandbox_time: (a: number) => number;
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
