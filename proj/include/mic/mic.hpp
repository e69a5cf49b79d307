#pragma once

#include "mic/error.hpp"
#include "mic/numerics.hpp"
#include "mic/encoder.hpp"
#include "mic/prompt.hpp"
#include "mic/synthtask.hpp"
#include "mic/config.hpp"
#include "mic/mpl.hpp"
#include "mic/membank.hpp"
#include "mic/icl.hpp"
#include "mic/trainer.hpp"
#include "mic/eval.hpp"
#include "mic/gradcheck.hpp"
