#include "sscan/tasks.hpp"

#include <algorithm>
#include <fstream>

#include "sscan/rng.hpp"

namespace sscan {

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::SelectiveCopying: return "selective_copying";
    case TaskKind::VanillaCopying: return "vanilla_copying";
    case TaskKind::InductionHeads: return "induction_heads";
  }
  return "?";
}

TaskKind task_from_name(const std::string& name) {
  if (name == "selective_copying") return TaskKind::SelectiveCopying;
  if (name == "vanilla_copying") return TaskKind::VanillaCopying;
  if (name == "induction_heads") return TaskKind::InductionHeads;
  throw DataError("unknown task: " + name);
}

void TaskSpec::validate() const {
  if (vocab < 4) throw DataError("task: vocab must be >= 4");
  if (kind == TaskKind::InductionHeads) {
    if (seq_len < 4) throw DataError("induction heads: seq_len must be >= 4");
    return;
  }
  if (n_memorize < 1) throw DataError("copying: n_memorize must be >= 1");
  if (n_memorize > seq_len - n_memorize)
    throw DataError("copying: K=" + std::to_string(n_memorize) +
                    " does not fit in L=" + std::to_string(seq_len));
  if (data_alphabet() < 1) throw DataError("copying: empty data alphabet");
}

index_t task_total_len(const TaskSpec& spec) {
  return spec.kind == TaskKind::InductionHeads ? spec.seq_len
                                               : spec.seq_len + spec.n_memorize;
}

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t batch_index) {
  std::uint64_t s = seed;
  (void)splitmix64(s);
  s ^= 0x6a09e667f3bcc908ULL + batch_index;
  return splitmix64(s);
}

void gen_copying(const TaskSpec& spec, index_t b, Rng& rng, bool selective,
                 TaskBatch& out, index_t L) {
  const index_t K = spec.n_memorize;
  const index_t total = L + K;
  const index_t base = b * total;
  // Data tokens (repeats allowed) and their positions.
  std::vector<index_t> positions(static_cast<size_t>(K));
  if (selective) {
    // First K of a partial Fisher-Yates shuffle of [0, L): K distinct
    // uniformly random slots.
    std::vector<index_t> slots(static_cast<size_t>(L));
    for (index_t i = 0; i < L; ++i) slots[static_cast<size_t>(i)] = i;
    for (index_t i = 0; i < K; ++i) {
      const index_t j = i + static_cast<index_t>(rng.uniform_int(
                                static_cast<std::uint64_t>(L - i)));
      std::swap(slots[static_cast<size_t>(i)], slots[static_cast<size_t>(j)]);
      positions[static_cast<size_t>(i)] = slots[static_cast<size_t>(i)];
    }
    std::sort(positions.begin(), positions.end());
  } else {
    for (index_t i = 0; i < K; ++i) positions[static_cast<size_t>(i)] = i;
  }
  for (index_t l = 0; l < L; ++l)
    out.tokens[static_cast<size_t>(base + l)] =
        static_cast<std::int32_t>(spec.noise_token());
  std::vector<std::int32_t> data(static_cast<size_t>(K));
  for (index_t i = 0; i < K; ++i) {
    data[static_cast<size_t>(i)] = static_cast<std::int32_t>(
        rng.uniform_int(static_cast<std::uint64_t>(spec.data_alphabet())));
    out.tokens[static_cast<size_t>(base + positions[static_cast<size_t>(i)])] =
        data[static_cast<size_t>(i)];
  }
  // Answer region: the delimiter marks the boundary and doubles as the first
  // answer slot; later slots are teacher-forced with the previous answer.
  out.tokens[static_cast<size_t>(base + L)] =
      static_cast<std::int32_t>(spec.delimiter_token());
  for (index_t i = 1; i < K; ++i)
    out.tokens[static_cast<size_t>(base + L + i)] = data[static_cast<size_t>(i - 1)];
  for (index_t i = 0; i < K; ++i) {
    out.targets[static_cast<size_t>(base + L + i)] = data[static_cast<size_t>(i)];
    out.mask[static_cast<size_t>(base + L + i)] = 1;
  }
}

void gen_induction(const TaskSpec& spec, index_t b, Rng& rng, TaskBatch& out,
                   index_t L) {
  const index_t base = b * L;
  // Random stream over the data alphabet; the induction marker appears only
  // where placed, so the (marker, answer) bigram is unique before the query.
  for (index_t l = 0; l < L; ++l)
    out.tokens[static_cast<size_t>(base + l)] = static_cast<std::int32_t>(
        rng.uniform_int(static_cast<std::uint64_t>(spec.data_alphabet())));
  const index_t p =
      static_cast<index_t>(rng.uniform_int(static_cast<std::uint64_t>(L - 2)));
  const std::int32_t answer = static_cast<std::int32_t>(
      rng.uniform_int(static_cast<std::uint64_t>(spec.data_alphabet())));
  out.tokens[static_cast<size_t>(base + p)] =
      static_cast<std::int32_t>(spec.induction_token());
  out.tokens[static_cast<size_t>(base + p + 1)] = answer;
  out.tokens[static_cast<size_t>(base + L - 1)] =
      static_cast<std::int32_t>(spec.induction_token());
  out.targets[static_cast<size_t>(base + L - 1)] = answer;
  out.mask[static_cast<size_t>(base + L - 1)] = 1;
}

}  // namespace

TaskBatch generate_batch(const TaskSpec& spec, index_t batch_size,
                         std::uint64_t batch_index, index_t override_len) {
  spec.validate();
  TaskSpec eff = spec;
  if (override_len > 0) eff.seq_len = override_len;
  eff.validate();
  const index_t total = task_total_len(eff);
  TaskBatch out;
  out.batch = batch_size;
  out.len = total;
  out.tokens.assign(static_cast<size_t>(batch_size * total), 0);
  out.targets.assign(static_cast<size_t>(batch_size * total), 0);
  out.mask.assign(static_cast<size_t>(batch_size * total), 0);
  Rng rng(mix_seed(spec.seed, batch_index));
  for (index_t b = 0; b < batch_size; ++b) {
    switch (eff.kind) {
      case TaskKind::SelectiveCopying:
        gen_copying(eff, b, rng, true, out, eff.seq_len);
        break;
      case TaskKind::VanillaCopying:
        gen_copying(eff, b, rng, false, out, eff.seq_len);
        break;
      case TaskKind::InductionHeads:
        gen_induction(eff, b, rng, out, eff.seq_len);
        break;
    }
  }
  return out;
}

void dump_batch(const TaskBatch& batch, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("dump_batch: cannot open " + path);
  for (index_t b = 0; b < batch.batch; ++b) {
    for (index_t l = 0; l < batch.len; ++l)
      os << (l ? " " : "") << batch.tokens[static_cast<size_t>(b * batch.len + l)];
    os << "\t";
    bool first = true;
    for (index_t l = 0; l < batch.len; ++l)
      if (batch.mask[static_cast<size_t>(b * batch.len + l)]) {
        os << (first ? "" : " ") << batch.targets[static_cast<size_t>(b * batch.len + l)];
        first = false;
      }
    os << "\n";
  }
}

}  // namespace sscan
