#pragma once

#include "reform/forensic_types.hpp"
#include "reform/answer_grammar.hpp"
#include "reform/synth_env.hpp"
#include "reform/policy_model.hpp"
#include "reform/losses.hpp"
#include "reform/rewards.hpp"
#include "reform/optimizer.hpp"
#include "reform/grpo.hpp"
#include "reform/metrics.hpp"
#include "reform/config.hpp"
#include "reform/gradcheck.hpp"
#include "reform/trainer.hpp"
