use deconflict_core::agent::{apply_action, enforce_speed_constraint, Action, AgentConfig};
use deconflict_core::airspace::WaypointKind;
use deconflict_core::alignment::{
    action_reward_against, format_reward, group_advantages, grpo_loss, levenshtein,
};
use deconflict_core::engine::{run_episode, EngineParams};
use deconflict_core::fixtures::{crossing, merge_pair, place, spawn, straight};
use deconflict_core::geo::{haversine_distance, step_position, update_speed, GeoPosition};
use deconflict_core::observation::{IntruderReport, RawObservation, VehicleSnapshot};
use deconflict_core::policy::{Policy, PolicyAssignment, RulePolicy};
use deconflict_core::prompt::{parse_action, render_prompt, target_text, Bins, BinningTable, PromptTemplate};
use deconflict_core::rules::{decide, RuleBranch, RuleParams};
use deconflict_core::sensing::{closest_front_intruders, detect_intruders, SensingParams};
use deconflict_core::Airspace;
use proptest::prelude::*;

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![Just(Action::Accelerate), Just(Action::Hold), Just(Action::Decelerate)]
}

fn position() -> impl Strategy<Value = GeoPosition> {
    (-60.0..60.0f64, -179.0..179.0f64).prop_map(|(la, lo)| GeoPosition::new(la, lo, 0.0))
}

proptest! {
    #[test]
    fn haversine_symmetric_and_nonnegative(p in position(), q in position()) {
        let d = haversine_distance(p, q);
        prop_assert!(d >= 0.0);
        prop_assert_eq!(d, haversine_distance(q, p));
        prop_assert_eq!(haversine_distance(p, p), 0.0);
        if p.lat_deg != q.lat_deg || p.lon_deg != q.lon_deg {
            prop_assert!(d > 0.0);
        }
    }

    #[test]
    fn step_then_measure(p in position(), h in 0.0..360.0f64, v in 0.1..50.0f64, dt in 0.1..5.0f64) {
        let q = step_position(p, h, v, dt);
        let d = haversine_distance(p, q);
        prop_assert!(((d - v * dt) / (v * dt)).abs() < 1e-6, "{} vs {}", d, v * dt);
    }

    #[test]
    fn update_speed_bounded_and_monotone(v in 0.0..50.0f64, a1 in -3.0..3.0f64, a2 in -3.0..3.0f64, dt in 0.1..5.0f64) {
        let (lo, hi) = (0.0, 44.88);
        let v = v.min(hi);
        let s1 = update_speed(v, a1, dt, lo, hi);
        let s2 = update_speed(v, a2, dt, lo, hi);
        prop_assert!((lo..=hi).contains(&s1));
        if a1 <= a2 {
            prop_assert!(s1 <= s2);
        }
    }

    #[test]
    fn speed_stays_in_limits_and_hold_is_exact(
        v0 in 0.0..30.12f64,
        actions in proptest::collection::vec(action(), 1..80),
    ) {
        let air = Airspace::new_unchecked(straight(50_000.0));
        let mut s = place(&air, "A01", AgentConfig::class_y(), "R_1", 0, 0.0, v0);
        for (k, a) in actions.into_iter().enumerate() {
            let once = enforce_speed_constraint(&s, a);
            prop_assert_eq!(enforce_speed_constraint(&s, once), once);
            let next = apply_action(&s, once, 1.0, &air, k as f64 + 1.0);
            if once == Action::Hold {
                prop_assert_eq!(next.speed_mps, s.speed_mps);
            }
            prop_assert!(next.speed_mps >= s.config.v_min_mps && next.speed_mps <= s.config.v_max_mps);
            s = next;
        }
    }

    #[test]
    fn x_sees_y_that_cannot_see_it(gap in 760.0..990.0f64) {
        let air = Airspace::new_unchecked(straight(5000.0));
        let x = place(&air, "A01", AgentConfig::class_x(), "R_1", 0, 100.0, 20.0);
        let y = place(&air, "A02", AgentConfig::class_y(), "R_1", 0, 100.0 + gap, 20.0);
        let all = vec![x.clone(), y.clone()];
        let p = SensingParams::default();
        prop_assert_eq!(detect_intruders(&x, &all, &air, &p).len(), 1);
        prop_assert_eq!(detect_intruders(&y, &all, &air, &p).len(), 0);
    }

    #[test]
    fn front_views_sorted_truncated(
        along in proptest::collection::vec(0.0..2900.0f64, 1..8),
        k in 0usize..4,
    ) {
        let air = Airspace::new_unchecked(straight(3000.0));
        let mut all = vec![place(&air, "O", AgentConfig::class_x(), "R_1", 0, 1500.0, 20.0)];
        for (i, s) in along.iter().enumerate() {
            all.push(place(&air, &format!("I{i}"), AgentConfig::class_y(), "R_1", 0, *s, 20.0));
        }
        let views = detect_intruders(&all[0], &all, &air, &SensingParams::default());
        let front = closest_front_intruders(&views, k);
        prop_assert!(front.len() <= k);
        prop_assert!(front.iter().all(|v| v.is_front));
        prop_assert!(front.windows(2).all(|w| w[0].distance_m <= w[1].distance_m));
    }

    #[test]
    fn same_leg_ttc(gap in 200.0..900.0f64, v_own in 5.0..44.0f64, v_int in 5.0..44.0f64) {
        let air = Airspace::new_unchecked(straight(5000.0));
        let cfg = AgentConfig::class_x();
        let mut own = place(&air, "A02", cfg.clone(), "R_1", 0, 100.0, v_own);
        let mut int = place(&air, "A01", cfg, "R_1", 0, 100.0 + gap, v_int);
        let p = SensingParams::default();
        let mut last = f64::INFINITY;
        for t in 0..5 {
            let all = vec![own.clone(), int.clone()];
            let views = detect_intruders(&own, &all, &air, &p);
            if views.is_empty() || !views[0].is_front {
                break;
            }
            let ttc = views[0].ttc_s;
            if v_own <= v_int {
                prop_assert_eq!(ttc, f64::INFINITY);
            } else if views[0].distance_m > 1.0 {
                prop_assert!(ttc.is_finite() && ttc < last);
                last = ttc;
            }
            own = apply_action(&own, Action::Hold, 1.0, &air, t as f64);
            int = apply_action(&int, Action::Hold, 1.0, &air, t as f64);
        }
    }
}

fn vehicle(id: &str, route: &str, dist: f64, speed: f64) -> VehicleSnapshot {
    VehicleSnapshot {
        id: id.into(),
        vehicle_type: "Google Wing Hummingbird".into(),
        lat: 33.13,
        lon: -96.86,
        next_wpt_id: "WP2".into(),
        next_wpt_type: WaypointKind::Merge,
        dist_to_nxt_wpt_m: dist,
        speed_mps: speed,
        min_spd_mps: 0.0,
        max_spd_mps: 44.88,
        speed_change_per_second_mps2: 1.71,
        heading_deg: 10.0,
        altitude_m: 350.0,
        route_id: route.into(),
        last_action: Action::Hold,
    }
}

#[derive(Debug, Clone)]
struct ObsSpec {
    own_dist: f64,
    own_speed: f64,
    desired: f64,
    intruders: Vec<(f64, f64, f64, f64, bool)>,
}

fn obs_from(s: &ObsSpec) -> RawObservation {
    RawObservation {
        ownship: vehicle("A01", "R_1", s.own_dist, s.own_speed),
        desired_spd_mps: s.desired,
        did_ownship_have_nmac: false,
        intruders: s
            .intruders
            .iter()
            .enumerate()
            .map(|(i, &(dwp, dist, ttc, speed, same))| IntruderReport {
                vehicle: vehicle(&format!("B0{i}"), if same { "R_1" } else { "R_2" }, dwp, speed),
                distance_m: dist,
                ttc_s: ttc,
                same_route: same,
            })
            .collect(),
        rear_intruder: None,
        label: None,
    }
}

fn obs_spec() -> impl Strategy<Value = ObsSpec> {
    let intr = (
        0.0..6000.0f64,
        1.0..1000.0f64,
        prop_oneof![Just(f64::INFINITY), 0.5..400.0f64],
        0.0..44.88f64,
        any::<bool>(),
    );
    (
        0.0..6000.0f64,
        0.0..=44.88f64,
        20.0..44.0f64,
        proptest::collection::vec(intr, 0..=2),
    )
        .prop_map(|(own_dist, own_speed, desired, mut intruders)| {
            intruders.sort_by(|a, b| a.1.total_cmp(&b.1));
            ObsSpec {
                own_dist,
                own_speed,
                desired,
                intruders,
            }
        })
}

/// A value inside bin `i` of `b`, placed by `u` in `[0, 1)`.
fn in_bin(b: &Bins, i: usize, u: f64) -> f64 {
    let lo = if i == 0 { 0.0 } else { b.thresholds[i - 1] };
    let hi = b.thresholds.get(i).copied().unwrap_or(lo + 1000.0);
    lo + u * (hi - lo)
}

proptest! {
    #[test]
    fn decide_is_pure_and_respects_limits(spec in obs_spec(), seed in any::<u64>()) {
        let o = obs_from(&spec);
        let p = RuleParams::default();
        let a = decide(&o, &p, seed).unwrap();
        prop_assert_eq!(&a, &decide(&o, &p, seed).unwrap());
        let next = update_speed(o.ownship.speed_mps, AgentConfig::class_x().accel_for(a.action), 1.0, 0.0, 44.88);
        prop_assert!((0.0..=44.88).contains(&next));
        if o.ownship.speed_mps >= 44.88 {
            prop_assert_ne!(a.action, Action::Accelerate);
        }
        if o.ownship.speed_mps <= 0.0 {
            prop_assert_ne!(a.action, Action::Decelerate);
        }
        if a.fired_rule == RuleBranch::NearCollisionTie {
            let (_, pa) = a.partner_action.clone().unwrap();
            prop_assert_eq!(pa, a.branch_action().opposite());
        } else {
            prop_assert!(a.partner_action.is_none());
        }
    }

    #[test]
    fn same_bins_same_text(
        wp_bin in 0usize..4,
        d_bins in proptest::collection::vec((0usize..4, 0usize..4, 0usize..3, any::<bool>(), any::<bool>()), 0..=2),
        own_delta in (0usize..3, any::<bool>()),
        us in proptest::collection::vec(0.0..1.0f64, 24),
    ) {
        let bins = BinningTable::default();
        let tpl = PromptTemplate::default();
        let make = |off: usize| {
            let u = |k: usize| us[(k + off) % us.len()];
            let own_speed = 20.0 + u(0);
            let sign = if own_delta.1 { 1.0 } else { -1.0 };
            let desired = own_speed - sign * in_bin(&bins.speed_delta_mps, own_delta.0, u(1)).min(19.0);
            let intruders = d_bins
                .iter()
                .enumerate()
                .map(|(i, &(db, tb, sb, up, same))| {
                    let sign = if up { 1.0 } else { -1.0 };
                    (
                        1000.0,
                        in_bin(&bins.distance_m, db, u(2 + 4 * i)),
                        if tb == 3 { f64::INFINITY } else { in_bin(&bins.ttc_s, tb, u(3 + 4 * i)).max(0.01) },
                        own_speed + sign * in_bin(&bins.speed_delta_mps, sb, u(4 + 4 * i)).min(19.0),
                        same,
                    )
                })
                .collect();
            ObsSpec {
                own_dist: in_bin(&bins.waypoint_m, wp_bin, u(5)),
                own_speed,
                desired,
                intruders,
            }
        };
        let (a, b) = (obs_from(&make(0)), obs_from(&make(7)));
        prop_assert_eq!(render_prompt(&a, &bins, &tpl), render_prompt(&b, &bins, &tpl));
    }

    #[test]
    fn format_reward_bounds(a in "[a-zA-Z .:]{0,40}", b in "[a-zA-Z .:]{0,40}", g1 in 0.5..4.0f64, g2 in 0.5..4.0f64) {
        let r = format_reward(&a, &b, g1);
        prop_assert!((0.0..=1.0).contains(&r));
        if a != b {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            prop_assert!(format_reward(&a, &b, hi) <= format_reward(&a, &b, lo));
        } else {
            prop_assert_eq!(r, 1.0);
        }
    }

    #[test]
    fn levenshtein_metric(a in "[abc]{0,12}", b in "[abc]{0,12}", c in "[abc]{0,12}") {
        let ab = levenshtein(&a, &b);
        prop_assert!(ab <= levenshtein(&a, &c) + levenshtein(&c, &b));
        prop_assert!(ab <= a.chars().count().max(b.chars().count()));
        prop_assert_eq!(ab, levenshtein(&b, &a));
        prop_assert_eq!(ab == 0, a == b);
    }

    #[test]
    fn action_reward_two_values(text in ".{0,60}", target in action()) {
        let r = action_reward_against(&text, target);
        prop_assert!(r == 0.5 || r == -0.5);
    }

    #[test]
    fn advantages_zero_sum_and_shift_invariant(
        rewards in proptest::collection::vec(-2.0..2.0f64, 1..16),
        shift in -10.0..10.0f64,
        norm in any::<bool>(),
    ) {
        let a = group_advantages(&rewards, norm).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let b = group_advantages(&shifted, norm).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn grpo_unit_ratio_and_flat_clip(
        adv in proptest::collection::vec(-2.0..2.0f64, 1..10),
        eps in 0.05..0.5f64,
        over in 0.0..1.0f64,
        over2 in 0.0..1.0f64,
    ) {
        let ones = vec![1.0; adv.len()];
        let mean = adv.iter().sum::<f64>() / adv.len() as f64;
        prop_assert!((grpo_loss(&ones, &adv, eps).unwrap() + mean).abs() < 1e-12);
        // ratios above 1 + eps with positive advantages sit on the clipped plateau
        let pos: Vec<f64> = adv.iter().map(|a| a.abs() + 0.1).collect();
        let r1: Vec<f64> = pos.iter().map(|_| 1.0 + eps + over).collect();
        let r2: Vec<f64> = pos.iter().map(|_| 1.0 + eps + over2).collect();
        let l1 = grpo_loss(&r1, &pos, eps).unwrap();
        let l2 = grpo_loss(&r2, &pos, eps).unwrap();
        prop_assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn parse_inverts_target(a in action()) {
        prop_assert_eq!(parse_action(&target_text(&PromptTemplate::default(), a)).unwrap(), a);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Splitting the same agents across policy instances (so query order and
    /// batching change) leaves the log untouched; every agent ends completed
    /// or still active, and NMAC totals match the event log.
    #[test]
    fn episodes_ignore_query_order(
        offsets in proptest::collection::vec((0.0..60.0f64, 12.0..30.0f64, any::<bool>()), 2..6),
        layout in 0usize..3,
        seed in 0u64..50,
        split_mask in any::<u8>(),
    ) {
        let mut scn = match layout {
            0 => straight(3000.0),
            1 => merge_pair(),
            _ => crossing(),
        };
        let routes: Vec<String> = scn.routes.iter().map(|r| r.id.clone()).collect();
        for (i, (t, v, y)) in offsets.iter().enumerate() {
            let class = if *y { "Y" } else { "X" };
            scn.spawn_plan.push(spawn(&format!("A{i:02}"), class, &routes[i % routes.len()], *t, *v));
        }
        let air = Airspace::new_unchecked(scn);
        let params = EngineParams { max_time_s: 900.0, ..EngineParams::default() };

        let mut one = RulePolicy::new(params.rule);
        let mut ps: Vec<&mut dyn Policy> = vec![&mut one];
        let a = run_episode(&air, &mut ps, &PolicyAssignment::all(0), &params, seed).unwrap();

        let (mut p0, mut p1) = (RulePolicy::new(params.rule), RulePolicy::new(params.rule));
        let mut ps: Vec<&mut dyn Policy> = vec![&mut p0, &mut p1];
        let mut assign = PolicyAssignment::all(0);
        for i in 0..offsets.len() {
            if split_mask & (1 << i) != 0 {
                assign.assign(format!("A{i:02}"), 1);
            }
        }
        let b = run_episode(&air, &mut ps, &assign, &params, seed).unwrap();
        prop_assert_eq!(&a.log, &b.log);
        prop_assert_eq!(a.metrics.nmac_all as usize, a.world.nmac_log.len());
        prop_assert_eq!(a.metrics.completed + a.metrics.timed_out, offsets.len() as u32);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_scenarios_hold_their_structure(seed in any::<u64>(), chained in any::<bool>(), per_route in any::<bool>()) {
        use deconflict_core::airspace::{generate_scenario, merge_partners, MergeLayout, ScenarioParams};
        let mut p = ScenarioParams::default();
        p.class_per_route = per_route;
        if chained {
            p.merge_layout = MergeLayout::Chained;
        }
        let s = generate_scenario(&p, seed).unwrap();
        prop_assert_eq!(&s, &generate_scenario(&p, seed).unwrap());
        prop_assert!(Airspace::new(s.clone()).is_ok());
        let kind = |id: &str| s.waypoint(id).unwrap().kind;
        for r in &s.routes {
            // merge partners share every waypoint from the merge on
            for other_id in merge_partners(&s, r) {
                let o = s.routes.iter().find(|x| x.id == other_id).unwrap();
                let m = r.waypoints.iter().position(|w| kind(w) == WaypointKind::Merge && o.waypoints.contains(w)).unwrap();
                let suffix = &r.waypoints[m..];
                let om = o.waypoints.iter().position(|w| *w == r.waypoints[m]).unwrap();
                let shorter = suffix.len().min(o.waypoints.len() - om);
                prop_assert_eq!(&suffix[..shorter], &o.waypoints[om..om + shorter]);
            }
            // spawn times per route are sorted and inside the window
            let times: Vec<f64> = s.spawn_plan.iter().filter(|e| e.route_id == r.id).map(|e| e.spawn_time_s).collect();
            prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(times.iter().all(|t| *t >= p.spawn_window_s.0 && *t <= p.spawn_window_s.1));
            if per_route {
                let classes: std::collections::BTreeSet<&str> = s.spawn_plan.iter().filter(|e| e.route_id == r.id).map(|e| e.class_name.as_str()).collect();
                prop_assert!(classes.len() <= 1);
            }
        }
        // routes from different trunks meet only at the intersection
        for (i, a) in s.routes.iter().enumerate() {
            for b in &s.routes[i + 1..] {
                let shared: Vec<&String> = a.waypoints.iter().filter(|w| b.waypoints.contains(w)).collect();
                let merged = shared.iter().any(|w| kind(w) == WaypointKind::Merge);
                if !merged && shared.iter().any(|w| kind(w) == WaypointKind::Intersection) {
                    prop_assert_eq!(shared.len(), 1);
                }
            }
        }
        for e in &s.spawn_plan {
            let c = s.classes.iter().find(|c| c.class_name == e.class_name).unwrap();
            prop_assert!(e.desired_speed_mps >= c.v_min_mps && e.desired_speed_mps <= c.v_max_mps);
        }
    }
}
