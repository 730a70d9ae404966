// Render a static scene, compare the analytic rigid flow with the renderer's
// ground truth, and report the stage-1 loss at the true state.

#include <cmath>
#include <cstdio>
#include <random>

#include "motionparse/metrics.hpp"
#include "motionparse/optimizer.hpp"
#include "motionparse/synth.hpp"

using namespace motionparse;

int main() {
  std::mt19937_64 rng(7);
  const auto scene = synth::random_static_scene(rng);
  const auto& k = scene.geometry.k;
  std::printf("scene %dx%d, camera translation (%.3f, %.3f, %.3f)\n", k.width, k.height,
              scene.geometry.pose.translation.x, scene.geometry.pose.translation.y, scene.geometry.pose.translation.z);

  const auto rigid = rigid_flow_field(scene.depth_t, scene.geometry.pose, k);
  const auto flow = metrics::eval_flow(rigid.flow, scene.flow_t_to_s);
  std::printf("rigid flow vs rendered flow: EPE %.3g px\n", flow.epe);

  const opt::Problem problem({scene.image_t, scene.image_s, std::nullopt, Pose{}, k});
  const auto state = opt::state_from_fields(scene.depth_t, scene.depth_s, scene.geometry.pose, scene.flow_t_to_s,
                                            scene.flow_s_to_t);
  const auto stage = opt::mono_schedule().stages[0];
  const auto masks = opt::compute_stage_masks(problem, state, stage.weights, stage.alpha_s);
  std::printf("stage '%s' loss at ground truth: %.6f\n", stage.name.c_str(),
              opt::evaluate(problem, masks, stage.weights, state));
}
