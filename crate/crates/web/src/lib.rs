//! wasm-bindgen entry points for the static demo in `www/`. Every export
//! returns a JSON string; failures come back as `{"error": "..."}`.

use rand::Rng;
use rowleak_core::bitprofile::{classify, filter_prefix, projected_range, WeightLeakMask, WeightSetClass};
use rowleak_core::dram_sim::{generate_template, DramGeometry};
use rowleak_core::hammerleak::{AttackConfig, AttackSim, CostModel, Strategy};
use rowleak_core::memsys::{MemorySystem, PhysPageId, VictimPageTag};
use rowleak_core::seeds;
use rowleak_core::victim_runtime::{ChunkShape, PackedModel, QuantizedLayer, QuantizedModel, TraceConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn respond(r: Result<Value, String>) -> String {
    match r {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e }).to_string(),
    }
}

/// Random int8 victim with the given layer widths.
fn random_victim(dims: &[usize], seed: u64) -> Result<QuantizedModel, String> {
    let mut rng = seeds::rng(seed);
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        let weights: Vec<f64> = (0..w[0] * w[1]).map(|_| rng.random_range(-1.0..1.0)).collect();
        layers.push(QuantizedLayer::quantize(w[0], w[1], &weights).map_err(|e| e.to_string())?);
    }
    Ok(QuantizedModel {
        biases: dims[1..].iter().map(|&c| vec![0.0; c]).collect(),
        layers,
        seed,
    })
}

/// Runs both strategies against a 32-56-4 victim on a default-density template
/// and returns `{"msb": [...], "allbits": [...]}` curve points.
#[wasm_bindgen]
pub fn simulate_recovery(seed: u64, rounds: usize) -> String {
    respond((|| {
        let geometry = DramGeometry::default();
        let template = generate_template(geometry, 0.71, 7.85, seeds::derive(seed, "template"))
            .map_err(|e| e.to_string())?;
        let victim = random_victim(&[32, 56, 4], seeds::derive(seed, "victim"))?;
        let packed = PackedModel::build(&victim, ChunkShape::default(), geometry.page_size_bytes)
            .map_err(|e| e.to_string())?;
        let mut out = serde_json::Map::new();
        for strategy in [Strategy::MsbPriority, Strategy::AllBits] {
            let mut sim = AttackSim::new(template.clone(), packed.clone(), 512, TraceConfig::default(), 0.0)
                .map_err(|e| e.to_string())?;
            let config = AttackConfig {
                rounds,
                strategy,
                cost_model: CostModel::for_strategy(strategy),
                seed: seeds::derive(seed, &format!("attack/{strategy}")),
            };
            let (_, curve) = sim.run_attack(&config).map_err(|e| e.to_string())?;
            let points: Vec<Value> = curve
                .points
                .iter()
                .map(|p| json!({ "round": p.round, "msb": p.msb, "full": p.full, "seconds": p.seconds }))
                .collect();
            out.insert(strategy.to_string(), Value::Array(points));
        }
        Ok(Value::Object(out))
    })())
}

/// Projected range of an int8 weight given which bits are known (`known`,
/// bit 7 = sign) and their values.
#[wasm_bindgen]
pub fn projected_range_json(known: u8, values: u8, scale: f64) -> String {
    let mask = WeightLeakMask { known, values };
    let k = filter_prefix(mask);
    let r = projected_range(values, k, scale);
    let class = match classify(k) {
        WeightSetClass::Full => "full".to_string(),
        WeightSetClass::Partial(n) => format!("partial({n})"),
        WeightSetClass::None => "none".to_string(),
    };
    json!({
        "prefix_len": k,
        "code_min": r.code_min,
        "code_max": r.code_max,
        "width": r.width(),
        "mean": r.mean,
        "class": class,
    })
    .to_string()
}

/// Exhausts a small memory, releases `released` frames (as `row:slot`,
/// comma-separated) in order, then lets a victim allocate as many pages.
/// Returns the frame each victim page landed in.
#[wasm_bindgen]
pub fn lifo_placement(released: &str, capacity: usize) -> String {
    respond((|| {
        let geometry = DramGeometry::new(8, 2, 64).map_err(|e| e.to_string())?;
        let ids = released
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let (r, c) = s.split_once(':').ok_or(format!("expected row:slot, got `{s}`"))?;
                let row = r.trim().parse().map_err(|_| format!("bad row in `{s}`"))?;
                let slot = c.trim().parse().map_err(|_| format!("bad slot in `{s}`"))?;
                Ok(PhysPageId::new(row, slot))
            })
            .collect::<Result<Vec<_>, String>>()?;
        let mut mem = MemorySystem::new(geometry, capacity.max(1));
        mem.exhaust_memory();
        mem.release_pages(&ids).map_err(|e| e.to_string())?;
        let tags: Vec<_> = (0..ids.len()).map(VictimPageTag::secret).collect();
        let placed = mem.allocate_for_victim(&tags).map_err(|e| e.to_string())?;
        let pageset: Vec<String> = mem.pageset().entries().iter().map(|p| p.to_string()).collect();
        Ok(json!({
            "placed": placed.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
            "pageset_after": pageset,
        }))
    })())
}
