#include "dithc/automem.h"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "dithc/trace.h"

namespace dithc::automem {

namespace {

constexpr int kPackShift = 16;
int pack(int pos, int idx) { return (pos << kPackShift) | idx; }
int pack_pos(int key) { return key >> kPackShift; }
int pack_idx(int key) { return key & ((1 << kPackShift) - 1); }

const char* residency_name(Residency r) {
  switch (r) {
    case Residency::Fast: return "fast";
    case Residency::Slow: return "slow";
    default: return "in_flight";
  }
}

std::size_t blocks_for(std::size_t bytes, std::size_t block) { return (bytes + block - 1) / block; }

}  // namespace

std::vector<std::size_t> Plan::order() const {
  std::vector<std::size_t> o;
  for (const auto& m : modules) o.push_back(m.id);
  return o;
}

std::string CapacityReport::to_json() const {
  nlohmann::json j;
  j["fast"] = {{"capacity", fast_capacity}, {"used", fast_used}, {"peak", fast_peak}};
  j["slow"] = {{"used", slow_used}, {"peak", slow_peak}};
  j["pinned_pool"] = {{"capacity", pool_capacity}, {"occupied", pool_occupied}, {"peak", pool_peak}};
  auto rows = nlohmann::json::array();
  for (const auto& r : residency) rows.push_back({{"tensor", r.tensor}, {"residency", r.residency}, {"bytes", r.bytes}});
  j["residency"] = rows;
  return j.dump();
}

AutoMemModule::AutoMemModule(std::shared_ptr<Module> inner, AutoMem* engine, std::size_t id)
    : inner_(std::move(inner)), engine_(engine), id_(id) {}

std::vector<Tensor> AutoMemModule::forward(std::span<const Tensor> inputs) {
  engine_->pre_forward(id_, inputs);
  std::vector<Tensor> out;
  try {
    out = inner_->forward(inputs);
  } catch (...) {
    set_default_tier(MemTier::Slow);
    throw;
  }
  engine_->post_forward(id_, inputs, out);
  return out;
}

std::vector<Tensor> AutoMemModule::backward(std::span<const Tensor> grad_outputs) {
  engine_->pre_backward(id_, grad_outputs);
  std::vector<Tensor> out;
  try {
    out = inner_->backward(grad_outputs);
  } catch (...) {
    set_default_tier(MemTier::Slow);
    throw;
  }
  engine_->after_backward(id_);
  return out;
}

AutoMem::AutoMem(MemorySystem& ms, AutoMemOptions opt) : ms_(ms), opt_(opt) {
  if (opt_.lookahead < 1) throw_argument("AutoMem: lookahead must be at least 1");
  // Fast pressure: finish queued offloads so their blocks return, then retry.
  ms_.fast().set_pressure_handler([this] { ms_.transfers().drain(TransferDirection::Offload); });
}

AutoMem::~AutoMem() {
  ms_.fast().set_pressure_handler({});
  ms_.transfers().drain();
}

std::shared_ptr<AutoMemModule> AutoMem::wrap(std::shared_ptr<Module> m) {
  if (!m) throw_argument("AutoMem::wrap: null module");
  if (dynamic_cast<AutoMemModule*>(m.get())) throw_argument("AutoMem::wrap: " + m->name() + " is already wrapped");
  if (std::find(inner_ptrs_.begin(), inner_ptrs_.end(), m.get()) != inner_ptrs_.end())
    throw_argument("AutoMem::wrap: " + m->name() + " is already wrapped");
  if (planned_) throw_argument("AutoMem::wrap: cannot wrap after warm-up");
  inner_ptrs_.push_back(m.get());
  wrapped_.push_back(std::make_shared<AutoMemModule>(std::move(m), this, wrapped_.size()));
  return wrapped_.back();
}

void AutoMem::wrap_graph(ModuleGraph& g) {
  for (std::size_t i = 0; i < g.num_nodes(); ++i) g.replace_module(i, wrap(g.node_ptr(i)));
}

void AutoMem::trace(const char* stream, const char* event, const std::string& what, std::size_t bytes) {
  if (Trace* t = ms_.trace()) t->record(stream, event, what, bytes);
}

void AutoMem::mismatch(const std::string& what) {
  state_ = planned_ ? State::Ready : State::Idle;
  throw PlanMismatch("AutoMem plan mismatch: " + what);
}

std::vector<Parameter*> AutoMem::params_at(std::size_t pos) {
  return wrapped_[plan_.modules[pos].id]->parameters();
}

std::vector<std::shared_ptr<Storage>> AutoMem::saved_storages(Module& m) const {
  std::set<const Storage*> skip;
  for (Parameter* p : m.parameters()) skip.insert(p->value().storage().get());
  std::vector<std::shared_ptr<Storage>> out;
  for (const Tensor& t : m.saved_tensors()) {
    if (!t.defined() || skip.count(t.storage().get())) continue;
    skip.insert(t.storage().get());
    out.push_back(t.storage());
  }
  return out;
}

// ------------------------------------------------------------------ warm-up

const Plan& AutoMem::warmup(const std::function<void()>& forward) {
  if (planned_) throw_argument("AutoMem::warmup: plan already recorded");
  if (wrapped_.empty()) throw_argument("AutoMem::warmup: no wrapped modules");
  state_ = State::Recording;
  rec_order_.clear();
  plan_ = Plan{};
  value_of_.clear();
  std::vector<std::shared_ptr<Storage>> keep;  // pins addresses for the duration of the recording
  {
    TierScope slow(MemTier::Slow);
    try {
      forward();
    } catch (...) {
      state_ = State::Idle;
      throw;
    }
  }
  for (auto& w : wrapped_) w->clear_saved();
  value_of_.clear();
  rec_owner_.clear();
  if (plan_.modules.size() != wrapped_.size())
    throw PlanMismatch("AutoMem warm-up: " + std::to_string(wrapped_.size() - plan_.modules.size()) +
                       " wrapped modules never ran");
  build_plan();
  place_slots();
  pos_of_id_.assign(wrapped_.size(), -1);
  for (std::size_t p = 0; p < plan_.modules.size(); ++p) pos_of_id_[plan_.modules[p].id] = static_cast<int>(p);

  pool_ = PinnedPool::create(ms_.arena_ptr(MemTier::Slow), plan_.block_bytes);
  pool_->reserve(plan_.capacity_bytes());
  for (const auto& s : plan_.slots) pool_slots_.push_back(pool_->assign_planned(0, s.first_block, s.bytes));
  // Parameters live in their slots between steps.
  for (std::size_t pos = 0; pos < plan_.modules.size(); ++pos) {
    auto ps = params_at(pos);
    for (std::size_t k = 0; k < ps.size(); ++k)
      offload(ps[k]->value().storage(), plan_.modules[pos].param_slots[k], "W:" + ps[k]->name(), true);
  }
  planned_ = true;
  state_ = State::Ready;
  return plan_;
}

void AutoMem::record_post_forward(std::size_t pos, std::span<const Tensor> inputs, const std::vector<Tensor>& outputs) {
  ModuleRecord& r = plan_.modules.at(pos);
  Module& m = *wrapped_[r.id];
  for (Parameter* p : m.parameters()) r.param_bytes.push_back(p->value().storage()->bytes());
  std::set<const Storage*> external;
  for (const Tensor& t : inputs) {
    auto it = t.defined() ? value_of_.find(t.storage().get()) : value_of_.end();
    const int v = it == value_of_.end() ? -1 : it->second;
    r.input_values.push_back(v);
    if (v >= 0) ++plan_.value_refcounts[static_cast<std::size_t>(v)];
    else if (t.defined()) external.insert(t.storage().get());
  }
  for (const Tensor& t : outputs) {
    if (!t.defined()) throw_argument("AutoMem: " + m.name() + " returned an undefined output");
    auto it = value_of_.find(t.storage().get());
    if (it != value_of_.end()) {
      r.output_values.push_back(it->second);
      continue;
    }
    const int v = static_cast<int>(plan_.value_refcounts.size());
    plan_.value_refcounts.push_back(0);
    plan_.value_bytes.push_back(t.storage()->bytes());
    value_of_[t.storage().get()] = v;
    r.output_values.push_back(v);
  }
  for (auto& st : saved_storages(m)) {
    if (external.count(st.get())) continue;
    auto own = rec_owner_.find(st.get());
    if (own != rec_owner_.end()) {
      r.borrowed.push_back(pack(own->second.first, own->second.second));
      auto& rec = plan_.modules[static_cast<std::size_t>(own->second.first)].saved[static_cast<std::size_t>(own->second.second)];
      rec.first_use = std::max(rec.first_use, static_cast<int>(pos));
      continue;
    }
    SavedRecord rec;
    rec.bytes = st->bytes();
    auto it = value_of_.find(st.get());
    rec.value = it == value_of_.end() ? -1 : it->second;
    rec.first_use = static_cast<int>(pos);
    rec_owner_[st.get()] = {static_cast<int>(pos), static_cast<int>(r.saved.size())};
    r.saved.push_back(rec);
  }
}

int AutoMem::event_pre_backward(std::size_t pos) const {
  const int M = static_cast<int>(plan_.modules.size());
  return 2 * M + 2 * (M - 1 - static_cast<int>(pos));
}

void AutoMem::build_plan() {
  const std::size_t M = plan_.modules.size();
  std::vector<int> remaining = plan_.value_refcounts;
  for (std::size_t j = 0; j < M; ++j) {
    for (int v : plan_.modules[j].input_values)
      if (v >= 0) --remaining[static_cast<std::size_t>(v)];
    // The last module's backward follows immediately; nothing it touched
    // is worth a round trip.
    if (j + 1 == M) break;
    for (std::size_t p = 0; p <= j; ++p)
      for (auto& s : plan_.modules[p].saved)
        if (s.offload_after < 0 && (s.value < 0 || remaining[static_cast<std::size_t>(s.value)] == 0))
          s.offload_after = static_cast<int>(j);
  }
}

void AutoMem::place_slots() {
  const std::size_t M = plan_.modules.size();
  const std::size_t B = opt_.slot_block_bytes;
  plan_.block_bytes = B;
  const int inf = 4 * static_cast<int>(M) + 8;
  // Parameters: dedicated, back to back.
  std::size_t next = 0;
  for (auto& r : plan_.modules) {
    Module& m = *wrapped_[r.id];
    auto ps = m.parameters();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      PlannedSlot s{"W:" + ps[k]->name(), r.param_bytes[k], next, blocks_for(r.param_bytes[k], B), 0, inf};
      next += s.blocks;
      r.param_slots.push_back(static_cast<int>(plan_.slots.size()));
      plan_.slots.push_back(s);
    }
  }
  plan_.param_blocks = next;
  // Activations and gradients share a region, packed by lifetime.
  std::vector<std::size_t> region;
  for (std::size_t pos = 0; pos < M; ++pos) {
    auto& r = plan_.modules[pos];
    for (std::size_t k = 0; k < r.saved.size(); ++k) {
      auto& sv = r.saved[k];
      if (sv.offload_after < 0) continue;
      PlannedSlot s{"X:" + r.name + "#" + std::to_string(k), sv.bytes, 0, blocks_for(sv.bytes, B),
                    2 * sv.offload_after + 1, event_pre_backward(static_cast<std::size_t>(sv.first_use))};
      sv.slot_index = static_cast<int>(plan_.slots.size());
      region.push_back(plan_.slots.size());
      plan_.slots.push_back(s);
    }
    auto ps = wrapped_[r.id]->parameters();
    for (std::size_t k = 0; k < ps.size(); ++k) {
      PlannedSlot s{"dW:" + ps[k]->name(), r.param_bytes[k], 0, blocks_for(r.param_bytes[k], B),
                    event_pre_backward(pos) + 1, inf};
      r.grad_slots.push_back(static_cast<int>(plan_.slots.size()));
      region.push_back(plan_.slots.size());
      plan_.slots.push_back(s);
    }
  }
  std::stable_sort(region.begin(), region.end(), [&](std::size_t a, std::size_t b) {
    const auto &x = plan_.slots[a], &y = plan_.slots[b];
    return x.blocks != y.blocks ? x.blocks > y.blocks : x.start < y.start;
  });
  std::vector<std::size_t> placed;
  std::size_t top = 0;
  for (std::size_t idx : region) {
    auto& s = plan_.slots[idx];
    std::vector<std::pair<std::size_t, std::size_t>> busy;
    for (std::size_t o : placed) {
      const auto& t = plan_.slots[o];
      if (t.start <= s.end && s.start <= t.end) busy.emplace_back(t.first_block, t.first_block + t.blocks);
    }
    std::sort(busy.begin(), busy.end());
    std::size_t off = 0;
    for (auto [b0, b1] : busy) {
      if (b0 >= off + s.blocks) break;
      off = std::max(off, b1);
    }
    s.first_block = off;
    top = std::max(top, off + s.blocks);
    placed.push_back(idx);
  }
  for (std::size_t idx : region) plan_.slots[idx].first_block += plan_.param_blocks;
  plan_.region_blocks = top;
  std::size_t peak = 0;
  for (int t = 0; t <= inf; ++t) {
    std::size_t live = 0;
    for (std::size_t idx : region)
      if (plan_.slots[idx].start <= t && t <= plan_.slots[idx].end) live += plan_.slots[idx].blocks;
    peak = std::max(peak, live);
  }
  plan_.predicted_peak_bytes = (plan_.param_blocks + peak) * B;
}

// -------------------------------------------------------------- transfers

void AutoMem::ensure_fast(const std::shared_ptr<Storage>& s, const std::string& label) {
  s->wait_resident();
  if (s->tier() == MemTier::Fast) return;
  Allocation dst;
  try {
    dst = ms_.allocate(s->bytes(), MemTier::Fast);
  } catch (const OutOfTier& e) {
    throw OutOfTier(e.tier(), e.requested(), e.used(), e.capacity(), capacity_report().to_json());
  }
  ++transfers_;
  ++barrier_loads_;
  ms_.migrate_async(s, std::move(dst), label).wait();
}

void AutoMem::prefetch(const std::shared_ptr<Storage>& s, const std::string& label) {
  if (s->residency() != Residency::Slow) return;
  Allocation dst;
  try {
    dst = ms_.allocate(s->bytes(), MemTier::Fast);
  } catch (const OutOfTier&) {
    return;  // no room now; the barrier loads it synchronously
  }
  ++transfers_;
  ms_.migrate_async(s, std::move(dst), label);
}

void AutoMem::offload(const std::shared_ptr<Storage>& s, int slot, const std::string& label, bool blocking) {
  s->wait_resident();
  // After warm-up anything outside Fast already sits in its slot.
  if (planned_ && s->tier() == MemTier::Slow) return;
  if (s->bytes() > plan_.slots.at(static_cast<std::size_t>(slot)).bytes)
    mismatch(label + " outgrew its slot (" + std::to_string(s->bytes()) + " bytes)");
  Allocation dst = pool_->acquire(pool_slots_.at(static_cast<std::size_t>(slot)));
  ++transfers_;
  auto req = ms_.migrate_async(s, std::move(dst), label);
  if (blocking) req.wait();
}

// ------------------------------------------------------------------- hooks

void AutoMem::begin_step() {
  const std::size_t M = plan_.modules.size();
  fwd_cursor_ = 0;
  bwd_cursor_ = -1;
  value_of_.clear();
  rec_owner_.clear();
  remaining_.assign(plan_.value_refcounts.size(), 0);
  zero_hits_.assign(plan_.value_refcounts.size(), 0);
  live_.assign(M, {});
  acc_pending_.assign(M, 0);
  post_bwd_done_.assign(M, false);
  grad_offloaded_.assign(M, {});
  state_ = State::Forward;
}

void AutoMem::pre_forward(std::size_t id, std::span<const Tensor> inputs) {
  if (state_ == State::Recording) {
    if (std::find(rec_order_.begin(), rec_order_.end(), id) != rec_order_.end())
      throw PlanMismatch("AutoMem warm-up: " + wrapped_[id]->name() + " ran twice in one forward pass");
    rec_order_.push_back(id);
    ModuleRecord r;
    r.id = id;
    r.name = wrapped_[id]->name();
    plan_.modules.push_back(r);
    trace("compute", "begin", r.name + ":fwd");
    return;
  }
  if (!planned_) throw PlanMismatch("AutoMem: forward before warm-up");
  if (state_ == State::Ready) begin_step();
  if (state_ != State::Forward) mismatch("forward of " + wrapped_[id]->name() + " during backward");
  const std::size_t pos = fwd_cursor_;
  if (pos >= plan_.modules.size() || plan_.modules[pos].id != id)
    mismatch("expected " + (pos < plan_.modules.size() ? plan_.modules[pos].name : std::string("end of forward")) +
             " at position " + std::to_string(pos) + ", got " + wrapped_[id]->name());
  for (Parameter* p : params_at(pos)) ensure_fast(p->value().storage(), "W:" + p->name());
  for (const Tensor& t : inputs)
    if (t.defined()) t.storage()->wait_resident();
  for (std::size_t a = 1; a <= opt_.lookahead && pos + a < plan_.modules.size(); ++a)
    for (Parameter* p : params_at(pos + a)) prefetch(p->value().storage(), "W:" + p->name());
  tier_before_ = set_default_tier(MemTier::Fast);
  trace("compute", "begin", plan_.modules[pos].name + ":fwd");
}

void AutoMem::post_forward(std::size_t id, std::span<const Tensor> inputs, const std::vector<Tensor>& outputs) {
  if (state_ == State::Recording) {
    trace("compute", "end", wrapped_[id]->name() + ":fwd");
    record_post_forward(plan_.modules.size() - 1, inputs, outputs);
    return;
  }
  const std::size_t pos = fwd_cursor_;
  const ModuleRecord& r = plan_.modules[pos];
  trace("compute", "end", r.name + ":fwd");
  set_default_tier(tier_before_);
  if (outputs.size() != r.output_values.size()) mismatch(r.name + " changed its output count");
  std::set<const Storage*> external;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const int v = k < r.input_values.size() ? r.input_values[k] : -2;
    if (v == -2) mismatch(r.name + " changed its input count");
    if (v < 0) {
      if (inputs[k].defined()) external.insert(inputs[k].storage().get());
      continue;
    }
    auto it = value_of_.find(inputs[k].storage().get());
    if (it == value_of_.end() || it->second != v) mismatch(r.name + " input " + std::to_string(k) + " came from an unplanned producer");
    int& rem = remaining_[static_cast<std::size_t>(v)];
    if (--rem < 0) throw Error("AutoMem: negative reference count on value " + std::to_string(v));
    if (rem == 0) {
      ++zero_hits_[static_cast<std::size_t>(v)];
      value_of_.erase(it);
    }
  }
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const int v = r.output_values[k];
    if (value_of_.count(outputs[k].storage().get())) continue;  // aliases an input
    value_of_[outputs[k].storage().get()] = v;
    remaining_[static_cast<std::size_t>(v)] = plan_.value_refcounts[static_cast<std::size_t>(v)];
    if (remaining_[static_cast<std::size_t>(v)] == 0) ++zero_hits_[static_cast<std::size_t>(v)];
  }
  // Match the saved storages against the recorded layout.
  auto& live = live_[pos];
  std::size_t borrowed = 0;
  for (auto& st : saved_storages(*wrapped_[r.id])) {
    if (external.count(st.get())) continue;
    auto own = rec_owner_.find(st.get());
    if (own != rec_owner_.end()) {
      if (borrowed >= r.borrowed.size() || r.borrowed[borrowed] != pack(own->second.first, own->second.second))
        mismatch(r.name + " reads an unplanned saved tensor");
      ++borrowed;
      continue;
    }
    const std::size_t k = live.size();
    if (k >= r.saved.size() || r.saved[k].bytes != st->bytes()) mismatch(r.name + " saved tensors differ from warm-up");
    rec_owner_[st.get()] = {static_cast<int>(pos), static_cast<int>(k)};
    live.push_back(Live{st, false});
  }
  if (live.size() != r.saved.size() || borrowed != r.borrowed.size())
    mismatch(r.name + " saved " + std::to_string(live.size()) + " tensors, warm-up saw " + std::to_string(r.saved.size()));
  if (pos + 1 < plan_.modules.size()) {
    auto ps = params_at(pos);
    for (std::size_t k = 0; k < ps.size(); ++k)
      offload(ps[k]->value().storage(), r.param_slots[k], "W:" + ps[k]->name(), false);
    for (std::size_t p = 0; p <= pos; ++p)
      for (std::size_t k = 0; k < plan_.modules[p].saved.size(); ++k) {
        const SavedRecord& sv = plan_.modules[p].saved[k];
        if (sv.offload_after != static_cast<int>(pos)) continue;
        if (sv.value >= 0 && remaining_[static_cast<std::size_t>(sv.value)] != 0)
          throw Error("AutoMem: offload scheduled for a referenced activation");
        offload(live_[p][k].storage, sv.slot_index, "X:" + plan_.modules[p].name + "#" + std::to_string(k), false);
        live_[p][k].offloaded = true;
      }
  }
  if (++fwd_cursor_ == plan_.modules.size()) {
    state_ = State::Backward;
    bwd_cursor_ = static_cast<int>(plan_.modules.size()) - 1;
  }
}

void AutoMem::pre_backward(std::size_t id, std::span<const Tensor> grad_outputs) {
  if (state_ != State::Backward || bwd_cursor_ < 0) mismatch("backward of " + wrapped_[id]->name() + " outside a step");
  const std::size_t pos = static_cast<std::size_t>(bwd_cursor_);
  const ModuleRecord& r = plan_.modules[pos];
  if (r.id != id) mismatch("expected backward of " + r.name + ", got " + wrapped_[id]->name());
  for (const Tensor& g : grad_outputs)
    if (g.defined()) g.storage()->wait_resident();
  auto ps = params_at(pos);
  for (Parameter* p : ps) ensure_fast(p->value().storage(), "W:" + p->name());
  for (std::size_t k = 0; k < live_[pos].size(); ++k)
    ensure_fast(live_[pos][k].storage, "X:" + r.name + "#" + std::to_string(k));
  for (int key : r.borrowed)
    ensure_fast(live_[static_cast<std::size_t>(pack_pos(key))][static_cast<std::size_t>(pack_idx(key))].storage,
                "X:" + plan_.modules[static_cast<std::size_t>(pack_pos(key))].name + "#" + std::to_string(pack_idx(key)));
  for (std::size_t a = 1; a <= opt_.lookahead && a <= pos; ++a)
    for (Parameter* p : params_at(pos - a)) prefetch(p->value().storage(), "W:" + p->name());
  if (pos > 0) {
    const ModuleRecord& prev = plan_.modules[pos - 1];
    for (std::size_t k = 0; k < live_[pos - 1].size(); ++k)
      prefetch(live_[pos - 1][k].storage, "X:" + prev.name + "#" + std::to_string(k));
  }
  acc_pending_[pos] = static_cast<int>(ps.size());
  grad_offloaded_[pos].assign(ps.size(), false);
  for (std::size_t k = 0; k < ps.size(); ++k)
    ps[k]->set_accumulate_hook([this, pos, k](Parameter& p) {
      if (grad_blocking_) {
        offload(p.grad().storage(), plan_.modules[pos].grad_slots[k], "dW:" + p.name(), true);
        grad_offloaded_[pos][k] = true;
      }
      if (--acc_pending_[pos] == 0) post_backward(pos);
    });
  tier_before_ = set_default_tier(MemTier::Fast);
  trace("compute", "begin", r.name + ":bwd");
}

void AutoMem::post_backward(std::size_t pos) {
  if (post_bwd_done_[pos]) return;
  post_bwd_done_[pos] = true;
  const ModuleRecord& r = plan_.modules[pos];
  auto ps = params_at(pos);
  for (std::size_t k = 0; k < ps.size(); ++k) {
    offload(ps[k]->value().storage(), r.param_slots[k], "W:" + ps[k]->name(), false);
    if (!grad_offloaded_[pos][k] && ps[k]->has_grad()) {
      offload(ps[k]->grad().storage(), r.grad_slots[k], "dW:" + ps[k]->name(), false);
      grad_offloaded_[pos][k] = true;
    }
  }
}

void AutoMem::after_backward(std::size_t id) {
  const std::size_t pos = static_cast<std::size_t>(bwd_cursor_);
  const ModuleRecord& r = plan_.modules[pos];
  if (r.id != id) mismatch("backward returned out of order");
  set_default_tier(tier_before_);
  trace("compute", "end", r.name + ":bwd");
  if (!post_bwd_done_[pos]) {
    for (Parameter* p : params_at(pos)) p->set_accumulate_hook(nullptr);
    post_backward(pos);
  }
  // X_i is dead after its own backward: released, not offloaded.
  for (auto& l : live_[pos]) {
    rec_owner_.erase(l.storage.get());
    l.storage.reset();
  }
  --bwd_cursor_;
}

void AutoMem::end_step() {
  if (!planned_) throw PlanMismatch("AutoMem::end_step before warm-up");
  if (state_ == State::Forward || (state_ == State::Backward && bwd_cursor_ >= 0)) {
    // Forward without (complete) backward: drop what the step still holds.
    for (auto& w : wrapped_) w->clear_saved();
  }
  for (auto& v : live_)
    for (auto& l : v) l.storage.reset();
  ms_.transfers().drain();
  const bool full = state_ == State::Backward && bwd_cursor_ < 0;
  if (full) {
    for (std::size_t v = 0; v < remaining_.size(); ++v)
      if (remaining_[v] != 0 || zero_hits_[v] != 1)
        throw Error("AutoMem: reference count of value " + std::to_string(v) + " ended at " +
                    std::to_string(remaining_[v]) + " after reaching zero " + std::to_string(zero_hits_[v]) + " times");
    for (std::size_t pos = 0; pos < plan_.modules.size(); ++pos)
      for (Parameter* p : params_at(pos))
        if (p->value().storage()->tier() != MemTier::Slow)
          throw Error("AutoMem: " + p->name() + " is still Fast-resident at step end");
  }
  value_of_.clear();
  rec_owner_.clear();
  state_ = State::Ready;
  ++steps_;
}

void AutoMem::abort_step() {
  for (auto& w : wrapped_) {
    w->clear_saved();
    for (Parameter* p : w->parameters()) p->set_accumulate_hook(nullptr);
  }
  for (auto& v : live_)
    for (auto& l : v) l.storage.reset();
  ms_.transfers().drain();
  value_of_.clear();
  rec_owner_.clear();
  set_default_tier(MemTier::Slow);
  state_ = planned_ ? State::Ready : State::Idle;
}

CapacityReport AutoMem::capacity_report() const {
  CapacityReport c;
  c.fast_capacity = ms_.arena(MemTier::Fast).capacity();
  c.fast_used = ms_.arena(MemTier::Fast).used_bytes();
  c.fast_peak = ms_.arena(MemTier::Fast).peak_bytes();
  c.slow_used = ms_.arena(MemTier::Slow).used_bytes();
  c.slow_peak = ms_.arena(MemTier::Slow).peak_bytes();
  if (pool_) {
    c.pool_capacity = pool_->capacity_bytes();
    c.pool_occupied = pool_->occupied_bytes();
    c.pool_peak = pool_->peak_occupied_bytes();
  }
  for (const auto& w : wrapped_)
    for (Parameter* p : w->parameters())
      c.residency.push_back({p->name(), residency_name(p->value().storage()->residency()), p->value().storage()->bytes()});
  for (std::size_t pos = 0; pos < live_.size(); ++pos)
    for (std::size_t k = 0; k < live_[pos].size(); ++k)
      if (live_[pos][k].storage)
        c.residency.push_back({"X:" + plan_.modules[pos].name + "#" + std::to_string(k),
                               residency_name(live_[pos][k].storage->residency()), live_[pos][k].storage->bytes()});
  return c;
}

}  // namespace dithc::automem
