#pragma once

#include "rotor_tomo/basis.hpp"
#include "rotor_tomo/dynamics.hpp"
#include "rotor_tomo/errors.hpp"
#include "rotor_tomo/kick.hpp"
#include "rotor_tomo/operators.hpp"
#include "rotor_tomo/pgd.hpp"
#include "rotor_tomo/problem.hpp"
#include "rotor_tomo/projection.hpp"
#include "rotor_tomo/scenario.hpp"
#include "rotor_tomo/thermal.hpp"
#include "rotor_tomo/trajectory_io.hpp"
