#include "kpal/adapt.hpp"

#include <json.hpp>

namespace kpal::adapt {

std::string trace_json(const AdaptationTrace& trace, std::uint64_t scene_seed,
                       const TtaConfig& cfg) {
  nlohmann::json j{
      {"scene_seed", scene_seed},
      {"losses", trace.losses},
      {"kept_proposals", trace.kept_proposals},
      {"kept_keypoints", trace.kept_keypoints},
      {"snapshot_id", trace.snapshot_id},
      {"config",
       {{"rounds", cfg.rounds},
        {"learning_rate", cfg.learning_rate},
        {"min_person_score", cfg.min_person_score},
        {"min_keypoint_prob", cfg.min_keypoint_prob},
        {"adapt_scope", cfg.scope == AdaptScope::full_backbone
                            ? "full_backbone"
                            : "last_stage"},
        {"visibility_loss_weight", cfg.visibility_loss_weight}}}};
  return j.dump();
}

}  // namespace kpal::adapt
